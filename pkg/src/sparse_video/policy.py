"""
src/sparse_video/policy.py — Block-execution policy trained online with REINFORCE.

Per frame the policy reads a state built from the current frame, the frame
state composite, the previous task output and the previous execution grid,
predicts one execution probability per block, and samples a binary decision.
Once the task output is known, per-block rewards combine the information gain
of each block with a cost term steering the executed fraction towards the
target tau; the REINFORCE gradient is accumulated and applied every
`update_period` policy-evaluated frames with RMSprop.

Network: 3x3/2 stem + 2x2 max-pool, three residual stages (strides 2, 2, 1)
of one (resnet8) or three (resnet20) blocks of two 3x3 convs each, 1x1 head to
one logit channel, adaptive average pooling to the block grid, sigmoid, clamp
to [1e-6, 1 - 1e-6]. No normalisation layers. The head starts at a tenth of
the He scale, so initial probabilities sit close to 0.5.

Usage:
    from sparse_video.policy import OnlinePolicy, assemble_state

    policy = OnlinePolicy(in_channels=8, cfg=cfg)
    policy.start_clip()
    decision = policy.decide(state, grid, rng)
    step = policy.learn(decision, ig_blocks)
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import RunConfig
from sparse_video.block_runtime import ActionGrid, BlockGrid
from sparse_video.tensor_core import (
    DTYPE,
    ConvSpec,
    NonFiniteError,
    OptimState,
    ShapeError,
    adaptive_avg_pool,
    adaptive_avg_pool_grad,
    conv2d,
    conv2d_grad,
    conv_macs,
    he_init,
    load_params,
    max_pool2x2,
    max_pool2x2_grad,
    relu,
    relu_grad,
    rmsprop_step,
    save_params,
    sigmoid,
)

logger = logging.getLogger(__name__)

PROB_MIN = 1e-6
STEM_WIDTH = 8
STAGE_WIDTHS = (8, 16, 16)
STAGE_STRIDES = (2, 2, 1)
HEAD_INIT_SCALE = 0.1

# Residual blocks per stage
BACKBONES = {"resnet8": 1, "resnet20": 3}

INPUT_CHANNELS = {"frame": 3, "prev_frame": 3, "state": 3, "actions": 1}

# Input subsets compared by the ablation bench (frame is always present)
ABLATION_INPUTS = (
    ("frame",),
    ("frame", "prev_frame"),
    ("frame", "state"),
    ("frame", "state", "output"),
    ("frame", "prev_frame", "state", "actions"),
    ("frame", "state", "output", "actions"),
)


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass
class PolicyState:
    """Channel-concatenated policy input (1, C, H, W) and the kind of every channel."""

    tensor: np.ndarray
    channels: tuple

    @property
    def num_channels(self) -> int:
        return self.tensor.shape[1]


def state_channels(inputs: tuple, output_channels: int) -> int:
    return sum(output_channels if kind == "output" else INPUT_CHANNELS[kind] for kind in inputs)


def assemble_state(frame: np.ndarray, frame_state: np.ndarray, output: np.ndarray,
                   prev_actions: ActionGrid, grid: BlockGrid,
                   inputs: tuple = ("frame", "state", "output", "actions"),
                   prev_frame: Optional[np.ndarray] = None) -> PolicyState:
    """
    Concatenate the selected inputs, in the order given, into one state tensor.

    frame, frame_state, prev_frame: (3, H, W); output: (K, H, W) task output
    channels; prev_actions is expanded to one full-resolution binary channel.
    """
    expected = (grid.height, grid.width)
    parts, names = [], []
    sources = {"frame": frame, "state": frame_state, "prev_frame": prev_frame, "output": output}
    for kind in inputs:
        if kind == "actions":
            prev_actions.check_grid(grid)
            channel = grid.upsample_mask(prev_actions.decisions)[None].astype(DTYPE)
        else:
            channel = sources[kind]
            if channel is None:
                raise ValueError(f"policy input {kind!r} selected but not provided")
            channel = np.asarray(channel, dtype=DTYPE)
        if channel.ndim != 3 or channel.shape[1:] != expected:
            raise ShapeError(f"policy input {kind!r} has extents {channel.shape[1:]}, expected {expected}")
        parts.append(channel)
        names.extend([kind] * channel.shape[0])
    return PolicyState(np.concatenate(parts, axis=0)[None], tuple(names))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

def _shortcut(x: np.ndarray, out_channels: int, stride: int) -> np.ndarray:
    """Parameter-free shortcut: spatial subsampling plus zero channel padding."""
    s = x[:, :, ::stride, ::stride]
    extra = out_channels - x.shape[1]
    if extra > 0:
        s = np.concatenate([s, np.zeros((s.shape[0], extra) + s.shape[2:], dtype=DTYPE)], axis=1)
    return s


def _shortcut_grad(grad: np.ndarray, in_shape: tuple, stride: int) -> np.ndarray:
    g = np.zeros(in_shape, dtype=DTYPE)
    g[:, :, ::stride, ::stride] = grad[:, :in_shape[1]]
    return g


class PolicyNetwork:
    """Residual block-probability network with hand-written backward pass."""

    def __init__(self, in_channels: int, seed: int = 0, backbone: str = "resnet8"):
        if backbone not in BACKBONES:
            raise ValueError(f"Unknown policy backbone: {backbone!r}. Use one of {', '.join(BACKBONES)}.")
        self.in_channels = in_channels
        self.backbone = backbone
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self._add_conv(rng, "stem", STEM_WIDTH, in_channels, 3)
        # (out_channels, stride) of every residual block; block k owns res{k}.conv1/conv2
        self.blocks: list[tuple[int, int]] = []
        width = STEM_WIDTH
        for out_c, stride in zip(STAGE_WIDTHS, STAGE_STRIDES):
            for j in range(BACKBONES[backbone]):
                k = len(self.blocks) + 1
                self._add_conv(rng, f"res{k}.conv1", out_c, width, 3)
                self._add_conv(rng, f"res{k}.conv2", out_c, out_c, 3)
                self.blocks.append((out_c, stride if j == 0 else 1))
                width = out_c
        self._add_conv(rng, "head", 1, width, 1)
        self.params["head.weight"] *= DTYPE(HEAD_INIT_SCALE)
        self.last_macs = 0

    def _add_conv(self, rng, name: str, out_c: int, in_c: int, k: int) -> None:
        self.params[f"{name}.weight"] = he_init(rng, out_c, in_c, k)
        self.params[f"{name}.bias"] = np.zeros(out_c, dtype=DTYPE)

    def _spec(self, name: str, stride: int, padding: int) -> ConvSpec:
        return ConvSpec.create(self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                               stride=stride, padding=padding)

    @property
    def num_convs(self) -> int:
        return sum(1 for name in self.params if name.endswith(".weight"))

    def param_shapes(self) -> dict:
        return {k: v.shape for k, v in self.params.items()}

    def forward(self, x: np.ndarray, grid: BlockGrid) -> tuple[np.ndarray, np.ndarray, dict]:
        """
        Returns (probabilities, logits, cache); probabilities and logits are Gh x Gw.
        """
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"policy expects (1, {self.in_channels}, H, W), got {x.shape}")
        macs = 0
        cache: dict = {"input": x}

        stem = self._spec("stem", 2, 1)
        s = conv2d(x, stem)
        macs += conv_macs(stem, *s.shape[2:])
        s_act = relu(s)
        h = max_pool2x2(s_act)
        cache["stem"] = (stem, s, s_act)

        blocks = []
        for k, (out_c, stride) in enumerate(self.blocks, 1):
            spec1 = self._spec(f"res{k}.conv1", stride, 1)
            spec2 = self._spec(f"res{k}.conv2", 1, 1)
            c1 = conv2d(h, spec1)
            r1 = relu(c1)
            c2 = conv2d(r1, spec2)
            z = c2 + _shortcut(h, out_c, stride)
            macs += conv_macs(spec1, *c1.shape[2:]) + conv_macs(spec2, *c2.shape[2:])
            blocks.append((h, spec1, c1, r1, spec2, z, stride))
            h = relu(z)
        cache["blocks"] = blocks

        head = self._spec("head", 1, 0)
        head_out = conv2d(h, head)
        macs += conv_macs(head, *head_out.shape[2:])
        cache["head"] = (head, h, head_out)

        logits = adaptive_avg_pool(head_out, grid.gh, grid.gw)[0, 0].astype(np.float64)
        if not np.all(np.isfinite(logits)):
            raise NonFiniteError("policy produced non-finite logits")
        probs = np.clip(sigmoid(logits).astype(np.float64), PROB_MIN, 1.0 - PROB_MIN)
        self.last_macs = macs
        return probs, logits, cache

    def backward(self, cache: dict, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of a scalar loss given dL/dlogits (Gh x Gw)."""
        grads: dict[str, np.ndarray] = {}
        head, h, head_out = cache["head"]
        g = adaptive_avg_pool_grad(head_out, np.asarray(grad_logits, dtype=DTYPE)[None, None])
        g_h, grads["head.weight"], grads["head.bias"] = conv2d_grad(h, head, g)

        for k in range(len(cache["blocks"]), 0, -1):
            h_in, spec1, c1, r1, spec2, z, stride = cache["blocks"][k - 1]
            g_z = relu_grad(z, g_h)
            g_r1, grads[f"res{k}.conv2.weight"], grads[f"res{k}.conv2.bias"] = conv2d_grad(r1, spec2, g_z)
            g_c1 = relu_grad(c1, g_r1)
            g_in, grads[f"res{k}.conv1.weight"], grads[f"res{k}.conv1.bias"] = conv2d_grad(h_in, spec1, g_c1)
            g_h = g_in + _shortcut_grad(g_z, h_in.shape, stride)

        stem, s, s_act = cache["stem"]
        g_s = relu_grad(s, max_pool2x2_grad(s_act, g_h))
        _, grads["stem.weight"], grads["stem.bias"] = conv2d_grad(cache["input"], stem, g_s)
        return grads


# ---------------------------------------------------------------------------
# Sampling, cost, rewards, loss
# ---------------------------------------------------------------------------

def action_rng(seed: int, clip_index: int, frame_index: int, stream: int = 0) -> np.random.Generator:
    """
    Counter-based generator: (seed, clip, stream) is the key, the frame index
    sits in the high counter word, so every frame owns a disjoint sequence.
    """
    key = np.array([seed, (clip_index << 8) | stream], dtype=np.uint64)
    counter = np.array([0, 0, 0, frame_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def sample_actions(probs: np.ndarray, rng: np.random.Generator, frame_index: int = 0) -> ActionGrid:
    """Independent Bernoulli draw per block."""
    u = rng.random(probs.shape)
    return ActionGrid((u < probs).astype(np.uint8), frame_index)


def compute_cost(actions: ActionGrid) -> float:
    """Fraction of executed blocks."""
    return actions.executed_count / actions.decisions.size


def update_moving_average(cost: float, previous: float, mu: float) -> float:
    """(1 - mu) * cost + mu * previous."""
    return (1.0 - mu) * cost + mu * previous


class CostTracker:
    """
    Momentum average of the executed fraction, reset to tau at clip start.

    literal=True averages the current cost with the previous *cost* instead of
    the previous average.
    """

    def __init__(self, tau: float, mu: float, literal: bool = False):
        self.tau, self.mu, self.literal = tau, mu, literal
        self.reset()

    def reset(self) -> None:
        self.average = self.tau
        self.previous_cost = self.tau

    def update(self, cost: float) -> float:
        anchor = self.previous_cost if self.literal else self.average
        self.average = update_moving_average(cost, anchor, self.mu)
        self.previous_cost = cost
        return self.average


@dataclass
class RewardGrid:
    total: np.ndarray
    ig_part: np.ndarray
    cost_part: np.ndarray


def compute_rewards(ig_blocks: np.ndarray, actions: ActionGrid, average_cost: float,
                    tau: float, gamma: float) -> RewardGrid:
    """
    R_b = sign_b * IG_b + gamma * sign_b * (tau - M_t), sign_b = +1 if executed else -1.
    """
    if np.any(ig_blocks < 0):
        raise ValueError("information gain must be non-negative")
    sign = np.where(actions.decisions == 1, 1.0, -1.0)
    ig_part = sign * ig_blocks
    cost_part = gamma * sign * (tau - average_cost)
    return RewardGrid(ig_part + cost_part, ig_part, cost_part)


def reinforce_loss(probs: np.ndarray, actions: ActionGrid,
                   rewards: np.ndarray) -> tuple[float, np.ndarray]:
    """
    L = -sum_b R_b * log pi(a_b), with dL/dp_b = -R_b * (a_b / p_b - (1 - a_b) / (1 - p_b)).
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_MIN, 1.0 - PROB_MIN)
    a = actions.decisions.astype(np.float64)
    log_pi = a * np.log(p) + (1.0 - a) * np.log(1.0 - p)
    loss = float(-(rewards * log_pi).sum())
    if not np.isfinite(loss):
        raise NonFiniteError("REINFORCE loss is not finite")
    grad_p = -rewards * (a / p - (1.0 - a) / (1.0 - p))
    return loss, grad_p


def logits_grad(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Chain dL/dp through the sigmoid; the clamp passes gradients unchanged."""
    return grad_p * probs * (1.0 - probs)


# ---------------------------------------------------------------------------
# Online policy
# ---------------------------------------------------------------------------

@dataclass
class Decision:
    probs: np.ndarray
    actions: ActionGrid
    cache: dict


@dataclass
class LearnStep:
    cost: float
    average_cost: float
    rewards: RewardGrid
    loss: float
    updated: bool


class OnlinePolicy:
    """Policy network, cost tracker, gradient accumulator and optimiser for one run."""

    def __init__(self, in_channels: int, cfg: RunConfig, network: Optional[PolicyNetwork] = None):
        self.cfg = cfg
        self.network = network or PolicyNetwork(in_channels, seed=cfg.seed, backbone=cfg.policy_backbone)
        self.optim = OptimState(lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                                smoothing=cfg.rms_smoothing, eps=cfg.rms_eps)
        self.tracker = CostTracker(cfg.tau, cfg.mu, cfg.literal_moving_average)
        self.online = cfg.online
        self._grad_sum: dict[str, np.ndarray] = {}
        self._pending = 0
        self.updates = 0

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.network.params

    def start_clip(self) -> None:
        self.tracker.reset()

    def decide(self, state: PolicyState, grid: BlockGrid, rng: np.random.Generator,
               frame_index: int = 0) -> Decision:
        probs, _, cache = self.network.forward(state.tensor, grid)
        return Decision(probs, sample_actions(probs, rng, frame_index), cache)

    def learn(self, decision: Decision, ig_blocks: np.ndarray) -> LearnStep:
        """Rewards and loss for one frame; accumulate gradients, step on schedule."""
        cost = compute_cost(decision.actions)
        average = self.tracker.update(cost)
        rewards = compute_rewards(ig_blocks, decision.actions, average, self.cfg.tau, self.cfg.gamma)
        loss, grad_p = reinforce_loss(decision.probs, decision.actions, rewards.total)
        updated = False
        if self.online:
            grads = self.network.backward(decision.cache, logits_grad(decision.probs, grad_p))
            for name, g in grads.items():
                acc = self._grad_sum.get(name)
                self._grad_sum[name] = g.astype(np.float64) if acc is None else acc + g
            self._pending += 1
            updated = self.scheduled_update()
        return LearnStep(cost, average, rewards, loss, updated)

    def scheduled_update(self) -> bool:
        """Apply the mean accumulated gradient once `update_period` frames are pending."""
        if not self.online or self._pending < self.cfg.update_period:
            return False
        mean = {k: (v / self._pending).astype(DTYPE) for k, v in self._grad_sum.items()}
        self.network.params, self.optim = rmsprop_step(self.network.params, mean, self.optim)
        self._grad_sum = {}
        self._pending = 0
        self.updates += 1
        logger.debug("policy update %d applied", self.updates)
        return True

    def save(self, directory: str) -> str:
        return save_params(directory, self.network.params)

    def load(self, directory: str) -> None:
        self.network.params = load_params(directory, self.network.param_shapes())
