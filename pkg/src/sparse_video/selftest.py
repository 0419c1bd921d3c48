"""
src/sparse_video/selftest.py — Fast invariant checks runnable on any install.

Covers the operator examples, gradient checks against finite differences,
dense/sparse equivalence of the toy detector, copy purity, MAC accounting,
the information-gain oracles and the REINFORCE gradient.

Usage:
    python -m sparse_video selftest
"""

import math
import sys
from typing import Callable

import numpy as np

from sparse_video.block_runtime import ActionGrid, BlockGrid, MacCounter, count_macs
from sparse_video.info_gain import Detection, block_maxpool, ig_detection, ig_semseg
from sparse_video.policy import logits_grad, reinforce_loss
from sparse_video.tasks import ToyDetector
from sparse_video.tensor_core import (
    ConvSpec,
    OptimState,
    conv2d,
    conv2d_grad,
    rmsprop_step,
    sigmoid,
)


def _ok(msg: str) -> None:
    print(f"[SELFTEST][OK] {msg}")


def _fail(msg: str) -> None:
    print(f"[SELFTEST][FAIL] {msg}", file=sys.stderr)


def _check(condition, msg: str) -> None:
    """Raise AssertionError(msg) unless `condition` holds."""
    if not condition:
        raise AssertionError(msg)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8))


def check_conv_examples() -> None:
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
    out = conv2d(x, ConvSpec.create(np.ones((1, 1, 3, 3), np.float32)))
    _check(out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 45.0, "3x3 ones kernel must sum to 45")
    out = conv2d(np.ones((1, 1, 2, 2), np.float32), ConvSpec.create(np.ones((1, 1, 3, 3), np.float32), padding=1))
    _check(np.all(out == 4.0), "padded 2x2 convolution must give 4 everywhere")


def check_conv_grad(seeds: int = 5, step: float = 1e-3) -> None:
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        spec = ConvSpec.create(w, rng.standard_normal(3).astype(np.float32), padding=1)
        g = rng.standard_normal((1, 3, 5, 5))
        gx, _, _ = conv2d_grad(x, spec, g.astype(np.float32))
        numeric = np.zeros_like(x, dtype=np.float64)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += step
            xm[idx] -= step
            numeric[idx] = ((conv2d(xp, spec, np.float64) - conv2d(xm, spec, np.float64)) * g).sum() / (2 * step)
        _check(_rel_err(gx, numeric) < 1e-3, f"conv2d_grad input mismatch (seed {seed})")


def check_sparse_equivalence(seeds: int = 3) -> None:
    grid = BlockGrid(32, 64, 16, depth=2)
    for seed in range(seeds):
        detector = ToyDetector.from_seed(seed)
        frame = np.random.default_rng(seed).random((3, 32, 64)).astype(np.float32)
        _, dense = detector.forward_dense(frame)
        canvas = detector.network.new_canvas(grid)
        detector.forward_sparse(frame, ActionGrid.ones(grid), canvas, grid)
        for name, act in dense.items():
            _check(np.abs(canvas[name] - act).max() <= 1e-5, f"layer {name} differs from dense (seed {seed})")


def check_copy_purity() -> None:
    grid = BlockGrid(32, 64, 16, depth=2)
    detector = ToyDetector.from_seed(0)
    canvas = detector.network.new_canvas(grid)
    first = np.random.default_rng(1).random((3, 32, 64)).astype(np.float32)
    dets = detector.forward_sparse(first, ActionGrid.ones(grid), canvas, grid)
    before = canvas.snapshot()
    second = np.random.default_rng(2).random((3, 32, 64)).astype(np.float32)
    again = detector.forward_sparse(second, ActionGrid.zeros(grid, 1), canvas, grid)
    for name in before.layers:
        _check(np.array_equal(before[name], canvas[name]), f"canvas {name} changed with zero blocks executed")
    _check(again == dets, "detections changed with zero blocks executed")


def check_macs() -> None:
    spec = ConvSpec.create(np.zeros((8, 8, 3, 3), np.float32), padding=1)
    grid = BlockGrid(64, 128, 16)
    decisions = np.zeros((grid.gh, grid.gw), np.uint8)
    decisions.flat[:3] = 1
    _check(count_macs(spec, grid, 1, ActionGrid(decisions)) == 442_368, "sparse MAC formula")
    _check(count_macs(spec, grid, 1, ActionGrid.ones(grid)) == count_macs(spec, grid, 1), "full == dense MACs")
    counter = MacCounter()
    counter.add("task", 5)
    counter.reset()
    _check(counter.total == 0, "reset clears every component")


def check_info_gain() -> None:
    prev = [Detection((0, 0, 10, 10), 0.8)]
    curr = [Detection((5, 0, 15, 10), 0.9)]
    ig = ig_detection(curr, prev, 16, 16).pixels
    _check(abs(ig[0, 12] - 0.6) < 1e-6 and abs(ig[0, 7] - 0.6) < 1e-6, "worked example, current box")
    _check(abs(ig[0, 2] - (2 / 3) * 0.8) < 1e-6, "worked example, matched previous box")
    gone = ig_detection([], prev, 16, 16).pixels
    _check(abs(gone[0, 0] - 0.8) < 1e-9 and gone[12, 12] == 0.0, "disappearing object keeps its score")
    _check(not ig_detection(prev, prev, 16, 16).pixels.any(), "self gain must be zero")
    kl = ig_semseg(np.array([[[1.0]], [[0.0]]]), np.array([[[0.5]], [[0.5]]])).pixels
    _check(abs(kl[0, 0] - math.log(2)) < 1e-6, "closed-form KL")
    pixels = np.zeros((32, 32))
    pixels[20, 3] = 0.9
    blocks = block_maxpool(pixels, BlockGrid(32, 32, 16))
    _check(blocks[1, 0] == 0.9 and blocks.sum() == 0.9, "block max-pool keeps the peak in its block")


def check_reinforce_grad(instances: int = 10, step: float = 1e-4) -> None:
    loss, _ = reinforce_loss(np.array([[0.7]]), ActionGrid(np.array([[1]])), np.array([[0.5]]))
    _check(abs(loss - (-0.5 * math.log(0.7))) < 1e-9, "single-block loss")
    for seed in range(instances):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((2, 4))
        actions = ActionGrid((rng.random((2, 4)) < 0.5).astype(np.uint8))
        rewards = rng.standard_normal((2, 4))

        def loss_at(logits):
            return reinforce_loss(1.0 / (1.0 + np.exp(-logits)), actions, rewards)[0]

        p = 1.0 / (1.0 + np.exp(-z))
        analytic = logits_grad(p, reinforce_loss(p, actions, rewards)[1])
        numeric = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += step
            zm[idx] -= step
            numeric[idx] = (loss_at(zp) - loss_at(zm)) / (2 * step)
        _check(_rel_err(analytic, numeric) < 1e-3, f"REINFORCE logits gradient (seed {seed})")


def check_rmsprop() -> None:
    state = OptimState(lr=1e-4, weight_decay=0.0, smoothing=0.99, eps=1e-8)
    params, new_state = rmsprop_step({"p": np.ones(1, np.float32)}, {"p": np.ones(1, np.float32)}, state)
    _check(abs(float(new_state.square_avg["p"][0]) - 0.01) < 1e-7, "squared-gradient average after one step")
    _check(abs(float(params["p"][0]) - (1 - 1e-4 / (0.1 + 1e-8))) < 1e-6, "reference RMSprop step")
    _check(float(sigmoid(np.zeros(1))[0]) == 0.5, "sigmoid(0) == 0.5")


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("conv2d examples", check_conv_examples),
    ("conv2d_grad vs finite differences", check_conv_grad),
    ("dense/sparse equivalence (toy detector)", check_sparse_equivalence),
    ("copy purity", check_copy_purity),
    ("MAC accounting", check_macs),
    ("information gain oracles", check_info_gain),
    ("REINFORCE gradient", check_reinforce_grad),
    ("RMSprop step", check_rmsprop),
]


def run_selftest() -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    for name, check in CHECKS:
        try:
            check()
            _ok(name)
        except Exception as exc:
            failures += 1
            _fail(f"{name}: {exc}")
    print(f"[SELFTEST] {len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return failures
