"""
src/sparse_video/block_runtime.py — Block-sparse execution over persistent feature canvases.

A frame is split into a Gh x Gw grid of square blocks. For every layer of a
network the runtime keeps a full-resolution canvas; on each frame only the
blocks selected by the ActionGrid are recomputed:

    gather (block + halo ring read from the input canvas)
      → dense operator on the stacked blocks (padding 0)
      → scatter (block interiors overwrite the output canvas)

Non-selected blocks keep the canvas values of the previous commit. Layers are
processed synchronously: every executed block of layer L is scattered before
any gather of layer L+1, so halo reads never depend on block order.

Usage:
    from sparse_video.block_runtime import BlockGrid, ActionGrid, BlockSparseNetwork

    grid = BlockGrid(64, 128, block_size=16, depth=2)
    net = BlockSparseNetwork(layers, in_channels=3)
    canvas = net.new_canvas(grid)
    net.run_sparse(frame, ActionGrid.ones(grid), canvas, grid)
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from sparse_video.tensor_core import (
    DTYPE,
    ConvSpec,
    ShapeError,
    as_tensor,
    conv2d,
    elementwise_and_pool,
    resize,
    save_tensor,
)

logger = logging.getLogger(__name__)

INPUT = "input"


# ---------------------------------------------------------------------------
# Grid and decisions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockGrid:
    """Gh x Gw lattice of square blocks over an image; depth = downsampling stages."""

    height: int
    width: int
    block_size: int
    depth: int = 0

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.height % self.block_size or self.width % self.block_size:
            raise ValueError(
                f"block size {self.block_size} does not divide image {self.height}x{self.width}"
            )
        if self.block_size % (2 ** self.depth):
            raise ValueError(
                f"block size {self.block_size} not divisible by 2^{self.depth} "
                f"(downsampling stages of the attached network)"
            )

    @property
    def gh(self) -> int:
        return self.height // self.block_size

    @property
    def gw(self) -> int:
        return self.width // self.block_size

    @property
    def num_blocks(self) -> int:
        return self.gh * self.gw

    def block_size_at(self, factor: int) -> int:
        """Block extent in a canvas downsampled by `factor`."""
        if factor < 1 or self.block_size % factor:
            raise ValueError(f"block size {self.block_size} cannot be scaled down by {factor}")
        return self.block_size // factor

    def upsample_mask(self, decisions: np.ndarray, factor: int = 1) -> np.ndarray:
        """Nearest-neighbour expansion of a Gh x Gw map to the canvas at `factor`."""
        bs = self.block_size_at(factor)
        return np.repeat(np.repeat(decisions, bs, axis=0), bs, axis=1)


@dataclass
class ActionGrid:
    """Binary execute (1) / copy (0) decision per block for one frame."""

    decisions: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        d = np.asarray(self.decisions)
        if d.ndim != 2:
            raise ShapeError(f"ActionGrid must be 2-D, got shape {d.shape}")
        if not np.all((d == 0) | (d == 1)):
            raise ValueError("ActionGrid values must be strictly binary")
        self.decisions = d.astype(np.uint8)

    @classmethod
    def ones(cls, grid: BlockGrid, frame_index: int = 0) -> "ActionGrid":
        return cls(np.ones((grid.gh, grid.gw), dtype=np.uint8), frame_index)

    @classmethod
    def zeros(cls, grid: BlockGrid, frame_index: int = 0) -> "ActionGrid":
        return cls(np.zeros((grid.gh, grid.gw), dtype=np.uint8), frame_index)

    @classmethod
    def checkerboard(cls, grid: BlockGrid, frame_index: int = 0) -> "ActionGrid":
        rows, cols = np.indices((grid.gh, grid.gw))
        return cls(((rows + cols) % 2 == 0).astype(np.uint8), frame_index)

    @property
    def shape(self) -> tuple[int, int]:
        return self.decisions.shape

    @property
    def executed_count(self) -> int:
        return int(self.decisions.sum())

    def executed_indices(self) -> list[tuple[int, int]]:
        """Executed block positions in row-major order (the stacking order)."""
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(self.decisions))]

    def check_grid(self, grid: BlockGrid) -> None:
        if self.shape != (grid.gh, grid.gw):
            raise ShapeError(f"ActionGrid {self.shape} does not match grid {grid.gh}x{grid.gw}")


# ---------------------------------------------------------------------------
# Canvases and MAC accounting
# ---------------------------------------------------------------------------

@dataclass
class FeatureCanvas:
    """Per-layer full-resolution activations persisting across frames."""

    layers: dict[str, np.ndarray] = field(default_factory=dict)
    last_write: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    def commit(self, name: str, tensor: np.ndarray, actions: ActionGrid) -> None:
        """Store a layer's new canvas and stamp the executed positions with the frame index."""
        self.layers[name] = tensor
        stamps = self.last_write.get(name)
        if stamps is None:
            stamps = np.full(actions.shape, -1, dtype=np.int64)
        stamps = stamps.copy()
        stamps[actions.decisions == 1] = actions.frame_index
        self.last_write[name] = stamps

    def snapshot(self) -> "FeatureCanvas":
        return FeatureCanvas(
            {k: v.copy() for k, v in self.layers.items()},
            {k: v.copy() for k, v in self.last_write.items()},
        )

    def export(self, out_dir: str, prefix: str = "") -> list[str]:
        """Write every layer as a BCT1 file; returns the written paths."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name in sorted(self.layers):
            path = os.path.join(out_dir, f"{prefix}{name}.bct1")
            save_tensor(path, self.layers[name])
            paths.append(path)
        return paths


COMPONENTS = ("task", "policy", "ig")


@dataclass
class MacCounter:
    """Multiply-accumulates by component, plus bytes moved by gather/scatter copies."""

    counts: dict[str, int] = field(default_factory=lambda: {c: 0 for c in COMPONENTS})
    bytes_moved: int = 0

    def add(self, component: str, macs: int) -> None:
        if component not in self.counts:
            raise ValueError(f"Unknown MAC component: {component!r}")
        if macs < 0:
            raise ValueError("MAC counts are non-negative")
        self.counts[component] += int(macs)

    def add_bytes(self, nbytes: int) -> None:
        self.bytes_moved += int(nbytes)

    def reset(self) -> None:
        self.counts = {c: 0 for c in COMPONENTS}
        self.bytes_moved = 0

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def count_macs(spec: ConvSpec, grid: BlockGrid, factor_out: int,
               actions: Optional[ActionGrid] = None) -> int:
    """
    MACs of one conv whose output lives at downsampling `factor_out`.

    actions=None gives the dense count Kh*Kw*Cin*Cout*Hout*Wout; otherwise the
    sparse count Kh*Kw*Cin*Cout*bs_out^2*n_exec. Halo rings add no MACs since
    the stacked blocks are convolved with padding 0.
    """
    bs_out = grid.block_size_at(factor_out)
    n = grid.num_blocks if actions is None else actions.executed_count
    return spec.kernel_h * spec.kernel_w * spec.in_channels * spec.out_channels * bs_out * bs_out * n


# ---------------------------------------------------------------------------
# Gather / scatter
# ---------------------------------------------------------------------------

def _check_layer_grid(layer: np.ndarray, actions: ActionGrid, block_size: int) -> None:
    if layer.ndim != 4:
        raise ShapeError(f"canvas layer must be NCHW, got {layer.shape}")
    gh, gw = actions.shape
    if layer.shape[2] != gh * block_size or layer.shape[3] != gw * block_size:
        raise ShapeError(
            f"canvas extents {layer.shape[2]}x{layer.shape[3]} inconsistent with "
            f"{gh}x{gw} blocks of {block_size}px"
        )


def gather_blocks(layer: np.ndarray, actions: ActionGrid, block_size: int,
                  halo: int, fill: str = "zero") -> np.ndarray:
    """
    Stack executed blocks with a halo ring read from the canvas.

    Returns (n_exec*N, C, bs+2*halo, bs+2*halo), block-major then batch.
    Positions outside the image are zero (fill="zero", matching dense zero
    padding) or replicate the border (fill="edge", matching resize clamping).
    """
    if halo < 0:
        raise ValueError(f"halo must be >= 0, got {halo}")
    if halo > block_size:
        raise ValueError(f"halo {halo} larger than block size {block_size}")
    _check_layer_grid(layer, actions, block_size)
    n, c = layer.shape[:2]
    pad = ((0, 0), (0, 0), (halo, halo), (halo, halo))
    padded = np.pad(layer, pad, mode="constant" if fill == "zero" else "edge") if halo else layer
    size = block_size + 2 * halo
    idx = actions.executed_indices()
    out = np.empty((len(idx) * n, c, size, size), dtype=DTYPE)
    for k, (r, col) in enumerate(idx):
        y, x = r * block_size, col * block_size
        out[k * n:(k + 1) * n] = padded[:, :, y:y + size, x:x + size]
    return out


def scatter_blocks(blocks: np.ndarray, actions: ActionGrid, layer: np.ndarray,
                   block_size: int, crop: int = 0) -> np.ndarray:
    """
    Write executed block interiors into a copy of the canvas layer.

    `crop` discards a ring of that width around each computed block. Values of
    non-executed blocks are bit-identical to the input canvas.
    """
    _check_layer_grid(layer, actions, block_size)
    n, c = layer.shape[:2]
    idx = actions.executed_indices()
    if blocks.shape[0] != len(idx) * n:
        raise ValueError(
            f"scatter received {blocks.shape[0]} blocks, ActionGrid executes {len(idx)} (batch {n})"
        )
    if len(idx) and blocks.shape[1] != c:
        raise ShapeError(f"block channels {blocks.shape[1]} != canvas channels {c}")
    out = layer.copy()
    for k, (r, col) in enumerate(idx):
        y, x = r * block_size, col * block_size
        out[:, :, y:y + block_size, x:x + block_size] = \
            blocks[k * n:(k + 1) * n, :, crop:crop + block_size, crop:crop + block_size]
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

ACTIVATIONS = ("relu", "sigmoid")
SPARSE_OPS = ("conv", "relu", "sigmoid", "max_pool2x2", "add", "upsample_nearest", "upsample_bilinear")
DENSE_FALLBACK_OPS = ("global_avg_pool",)


@dataclass
class LayerDef:
    """One node of a feed-forward network; `inputs` name earlier layers or INPUT."""

    name: str
    op: str
    inputs: tuple = (INPUT,)
    conv: Optional[ConvSpec] = None
    activation: Optional[str] = None

    def __post_init__(self):
        self.inputs = tuple(self.inputs)
        if self.op == "conv" and self.conv is None:
            raise ValueError(f"layer {self.name!r}: conv op needs a ConvSpec")
        if self.activation is not None and self.activation not in ACTIVATIONS:
            raise ValueError(f"layer {self.name!r}: unknown activation {self.activation!r}")


def _activate(x: np.ndarray, activation: Optional[str]) -> np.ndarray:
    return x if activation is None else elementwise_and_pool(activation, x)


def apply_dense(layer: LayerDef, inputs: list[np.ndarray]) -> np.ndarray:
    """Dense reference evaluation of one layer."""
    x = inputs[0]
    if layer.op == "conv":
        return _activate(conv2d(x, layer.conv), layer.activation)
    if layer.op in ACTIVATIONS or layer.op in ("max_pool2x2", "global_avg_pool"):
        return elementwise_and_pool(layer.op, x)
    if layer.op == "add":
        return _activate(elementwise_and_pool("add", x, other=inputs[1]), layer.activation)
    if layer.op in ("upsample_nearest", "upsample_bilinear"):
        mode = layer.op.split("_")[1]
        return resize(x, 2 * x.shape[2], 2 * x.shape[3], mode)
    raise ValueError(f"Unsupported operator {layer.op!r} in layer {layer.name!r}")


def _scale_out(layer: LayerDef, factor_in: int) -> int:
    if layer.op == "conv":
        return factor_in * layer.conv.stride
    if layer.op == "max_pool2x2":
        return factor_in * 2
    if layer.op.startswith("upsample"):
        if factor_in % 2:
            raise ValueError(f"layer {layer.name!r} would upsample beyond input resolution")
        return factor_in // 2
    return factor_in


def sparse_layer(layer: LayerDef, inputs: list[np.ndarray], prev_out: np.ndarray,
                 actions: ActionGrid, in_block: int,
                 counter: Optional[MacCounter] = None) -> np.ndarray:
    """
    gather → dense operator on stacked blocks → scatter, for one layer.

    Convs with kernel k use halo (k-1)/2 and internal padding 0; 1x1 convs use
    halo 0; stride-2 convs and max-pooling halve the block size; upsampling
    gathers a halo of 1 (edge fill), resizes and crops.
    """
    if layer.op not in SPARSE_OPS:
        raise ValueError(
            f"Operator {layer.op!r} (layer {layer.name!r}) is not supported in the sparse path; "
            f"supported: {', '.join(SPARSE_OPS)}"
        )
    n_exec = actions.executed_count
    crop = 0
    if layer.op == "conv":
        spec = layer.conv
        if spec.kernel_h != spec.kernel_w or spec.kernel_h % 2 == 0 or spec.padding != spec.kernel_h // 2:
            raise ValueError(
                f"Operator conv{spec.kernel_h}x{spec.kernel_w}/pad{spec.padding} (layer {layer.name!r}) "
                f"is not supported in the sparse path; needs odd square kernels with 'same' padding"
            )
        if in_block % spec.stride:
            raise ValueError(f"layer {layer.name!r}: block size {in_block} not divisible by stride {spec.stride}")
        blocks = gather_blocks(inputs[0], actions, in_block, spec.padding)
        out = _activate(conv2d(blocks, spec.with_padding(0)), layer.activation) if n_exec else blocks[:, :0]
        out_block = in_block // spec.stride
        if counter is not None:
            counter.add("task", spec.kernel_h * spec.kernel_w * spec.in_channels
                        * spec.out_channels * out_block * out_block * n_exec)
    elif layer.op in ACTIVATIONS:
        blocks = gather_blocks(inputs[0], actions, in_block, 0)
        out = elementwise_and_pool(layer.op, blocks) if n_exec else blocks
        out_block = in_block
    elif layer.op == "max_pool2x2":
        blocks = gather_blocks(inputs[0], actions, in_block, 0)
        out = elementwise_and_pool("max_pool2x2", blocks) if n_exec else blocks
        out_block = in_block // 2
    elif layer.op == "add":
        a = gather_blocks(inputs[0], actions, in_block, 0)
        b = gather_blocks(inputs[1], actions, in_block, 0)
        out = _activate(elementwise_and_pool("add", a, other=b), layer.activation) if n_exec else a
        blocks = np.concatenate([a, b], axis=1)
        out_block = in_block
    else:
        mode = layer.op.split("_")[1]
        blocks = gather_blocks(inputs[0], actions, in_block, 1, fill="edge")
        size = 2 * (in_block + 2)
        out = resize(blocks, size, size, mode) if n_exec else blocks
        out_block, crop = 2 * in_block, 2

    if counter is not None:
        counter.add_bytes(blocks.nbytes + n_exec * prev_out.shape[0] * prev_out.shape[1]
                          * out_block * out_block * prev_out.itemsize)
    return scatter_blocks(out, actions, prev_out, out_block, crop)


class BlockSparseNetwork:
    """A feed-forward layer graph evaluable densely or block-sparsely over canvases."""

    def __init__(self, layers: list[LayerDef], in_channels: int):
        self.layers = list(layers)
        self.in_channels = in_channels
        seen = {INPUT}
        self.factors: dict[str, int] = {INPUT: 1}
        self.dense_only: set[str] = set()
        for layer in self.layers:
            if layer.name in seen:
                raise ValueError(f"Duplicate layer name: {layer.name!r}")
            missing = [i for i in layer.inputs if i not in seen]
            if missing:
                raise ValueError(f"layer {layer.name!r} reads undefined input(s): {', '.join(missing)}")
            factors = {self.factors[i] for i in layer.inputs}
            if len(factors) != 1:
                raise ValueError(f"layer {layer.name!r} mixes inputs at different scales")
            if layer.op in DENSE_FALLBACK_OPS or any(i in self.dense_only for i in layer.inputs):
                self.dense_only.add(layer.name)
                self.factors[layer.name] = factors.pop()
            else:
                self.factors[layer.name] = _scale_out(layer, factors.pop())
            seen.add(layer.name)

    @property
    def depth(self) -> int:
        """Downsampling stages (log2 of the coarsest canvas factor)."""
        return int(np.log2(max(self.factors.values())))

    def conv_layers(self) -> list[LayerDef]:
        return [layer for layer in self.layers if layer.op == "conv"]

    def run_dense(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Evaluate every layer densely; returns name → activation (INPUT included)."""
        acts = {INPUT: as_tensor(x)}
        for layer in self.layers:
            acts[layer.name] = apply_dense(layer, [acts[i] for i in layer.inputs])
        return acts

    def new_canvas(self, grid: BlockGrid, batch: int = 1) -> FeatureCanvas:
        """Zero canvases at the dense extents of every layer."""
        shapes = {k: v.shape for k, v in self.run_dense(
            np.zeros((batch, self.in_channels, grid.height, grid.width), dtype=DTYPE)).items()}
        canvas = FeatureCanvas()
        blank = ActionGrid.zeros(grid)
        for name, shape in shapes.items():
            canvas.commit(name, np.zeros(shape, dtype=DTYPE), blank)
        return canvas

    def run_sparse(self, frame: np.ndarray, actions: ActionGrid, canvas: FeatureCanvas,
                   grid: BlockGrid, counter: Optional[MacCounter] = None) -> FeatureCanvas:
        """
        Process one frame in place on `canvas`: the input canvas takes the frame's
        executed blocks, then each layer is recomputed on those blocks only.
        """
        actions.check_grid(grid)
        frame = as_tensor(frame)
        if frame.ndim == 3:
            frame = frame[None]
        if INPUT not in canvas:
            raise ValueError("canvas has no input layer; create it with new_canvas()")
        frame_blocks = gather_blocks(frame, actions, grid.block_size, 0)
        canvas.commit(INPUT, scatter_blocks(frame_blocks, actions, canvas[INPUT], grid.block_size), actions)
        if counter is not None:
            counter.add_bytes(2 * frame_blocks.nbytes)

        for layer in self.layers:
            inputs = [canvas[i] for i in layer.inputs]
            if layer.name in self.dense_only:
                out = apply_dense(layer, inputs)
            else:
                in_block = grid.block_size_at(self.factors[layer.inputs[0]])
                out = sparse_layer(layer, inputs, canvas[layer.name], actions, in_block, counter)
            canvas.commit(layer.name, out, actions)
            logger.debug("layer %s committed (%d blocks)", layer.name, actions.executed_count)
        return canvas

    def dense_macs(self, grid: BlockGrid) -> int:
        return sum(count_macs(layer.conv, grid, self.factors[layer.name])
                   for layer in self.conv_layers() if layer.name not in self.dense_only)

    def sparse_macs(self, grid: BlockGrid, actions: ActionGrid) -> int:
        return sum(count_macs(layer.conv, grid, self.factors[layer.name], actions)
                   for layer in self.conv_layers() if layer.name not in self.dense_only)
