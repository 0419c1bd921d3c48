"""
src/sparse_video/tensor_core.py — Minimal deterministic tensor engine.

Tensors are float32 numpy arrays in NCHW layout. Convolutions use im2col
(sliding-window view + one matmul); the column order is channel-major, then
kernel row-major, and accumulation happens in float64 before rounding back to
float32, so the dense path and the block-stacked sparse path agree to well
below 1e-5.

Every forward operator used by the policy network has a hand-written backward
counterpart; there is no autodiff graph.

Usage:
    from sparse_video.tensor_core import ConvSpec, conv2d, conv2d_grad

    spec = ConvSpec.create(weight, bias, stride=1, padding=1)
    y = conv2d(x, spec)
    gx, gw, gb = conv2d_grad(x, spec, gy)
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float32
BCT1_MAGIC = b"BCT1"


class ShapeError(ValueError):
    """Operand shapes violate an operator's contract."""


class NonFiniteError(FloatingPointError):
    """An operator produced NaN or Inf."""


def as_tensor(x) -> np.ndarray:
    """Return x as a contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} produced non-finite values")
    return x


def _require_rank4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvSpec:
    """A 2-D convolution: geometry plus weights (Cout, Cin, Kh, Kw) and bias (Cout)."""

    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        self.weight = as_tensor(self.weight)
        self.bias = as_tensor(self.bias)
        expected = (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        if self.weight.shape != expected:
            raise ShapeError(f"weight shape {self.weight.shape} != {expected}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @classmethod
    def create(cls, weight, bias=None, stride: int = 1, padding: int = 0) -> "ConvSpec":
        weight = as_tensor(weight)
        cout, cin, kh, kw = weight.shape
        if bias is None:
            bias = np.zeros(cout, dtype=DTYPE)
        return cls(kh, kw, stride, padding, cin, cout, weight, bias)

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        return (
            (height + 2 * self.padding - self.kernel_h) // self.stride + 1,
            (width + 2 * self.padding - self.kernel_w) // self.stride + 1,
        )

    def with_padding(self, padding: int) -> "ConvSpec":
        return ConvSpec(self.kernel_h, self.kernel_w, self.stride, padding,
                        self.in_channels, self.out_channels, self.weight, self.bias)


def _im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Columns (N, Ho, Wo, Cin*Kh*Kw) in channel-major, kernel row-major order."""
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    win = win[:, :, ::spec.stride, ::spec.stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * spec.kernel_h * spec.kernel_w)


def _check_conv_input(x: np.ndarray, spec: ConvSpec) -> None:
    _require_rank4(x, "conv2d")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    h, w = x.shape[2] + 2 * spec.padding, x.shape[3] + 2 * spec.padding
    if h < spec.kernel_h or w < spec.kernel_w:
        raise ShapeError(
            f"conv2d input {x.shape[2]}x{x.shape[3]} (padding {spec.padding}) "
            f"smaller than kernel {spec.kernel_h}x{spec.kernel_w}"
        )


def conv2d(x: np.ndarray, spec: ConvSpec, out_dtype=DTYPE) -> np.ndarray:
    """Dense 2-D convolution (cross-correlation) with zero padding; out_dtype=np.float64 skips the final rounding."""
    x = as_tensor(x)
    _check_conv_input(x, spec)
    cols = _im2col(x, spec).astype(np.float64)
    wmat = spec.weight.reshape(spec.out_channels, -1).astype(np.float64)
    out = cols @ wmat.T + spec.bias.astype(np.float64)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=out_dtype)
    return check_finite(out, "conv2d")


def conv2d_grad(x: np.ndarray, spec: ConvSpec, grad_out: np.ndarray):
    """
    Backward pass of conv2d.

    Returns:
        (grad_input, grad_weights, grad_bias) shaped like x, spec.weight, spec.bias.
    """
    x = as_tensor(x)
    _check_conv_input(x, spec)
    n, _, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    expected = (n, spec.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv2d output shape {expected}")

    g = grad_out.astype(np.float64).transpose(0, 2, 3, 1)            # N, Ho, Wo, Cout
    cols = _im2col(x, spec).astype(np.float64)                        # N, Ho, Wo, K
    wmat = spec.weight.reshape(spec.out_channels, -1).astype(np.float64)

    grad_w = np.einsum("nhwo,nhwk->ok", g, cols).reshape(spec.weight.shape)
    grad_b = g.sum(axis=(0, 1, 2))

    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    gcols = (g @ wmat).reshape(n, ho, wo, spec.in_channels, kh, kw)
    gxp = np.zeros((n, spec.in_channels, h + 2 * p, w + 2 * p), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, p:p + h, p:p + w]

    return (
        check_finite(as_tensor(grad_x), "conv2d_grad"),
        check_finite(as_tensor(grad_w), "conv2d_grad"),
        check_finite(as_tensor(grad_b), "conv2d_grad"),
    )


def conv_macs(spec: ConvSpec, out_h: int, out_w: int) -> int:
    """Multiply-accumulates of one dense conv producing an out_h x out_w map (batch 1)."""
    return spec.kernel_h * spec.kernel_w * spec.in_channels * spec.out_channels * out_h * out_w


def he_init(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    """Kaiming-normal conv weight (out_c, in_c, k, k) for ReLU networks."""
    std = np.sqrt(2.0 / (in_c * k * k))
    return (rng.standard_normal((out_c, in_c, k, k)) * std).astype(DTYPE)


# ---------------------------------------------------------------------------
# Elementwise operators and pooling
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(as_tensor(x), 0).astype(DTYPE)


def relu_grad(x, grad_out):
    return np.where(as_tensor(x) > 0, grad_out, 0).astype(DTYPE)


def sigmoid(x):
    x64 = np.asarray(x, dtype=np.float64)
    return as_tensor(0.5 * (1.0 + np.tanh(0.5 * x64)))


def sigmoid_grad(x, grad_out):
    s = sigmoid(x).astype(np.float64)
    return as_tensor(grad_out * s * (1.0 - s))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    return a + b


def add_grad(grad_out):
    return as_tensor(grad_out), as_tensor(grad_out)


def max_pool2x2(x):
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    _require_rank4(x, "max_pool2x2")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"max_pool2x2 needs extents >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    v = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    return v.max(axis=(3, 5))


def max_pool2x2_grad(x, grad_out):
    """Routes each output gradient to the first maximal element of its window."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    v = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    arg = v.reshape(n, c, ho, wo, 4).argmax(axis=-1)
    onehot = np.eye(4, dtype=DTYPE)[arg] * grad_out[..., None]
    g = onehot.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    out = np.zeros_like(x)
    out[:, :, :2 * ho, :2 * wo] = g
    return out


def _adaptive_bins(in_size: int, out_size: int) -> list[tuple[int, int]]:
    return [
        (i * in_size // out_size, -(-(i + 1) * in_size // out_size))
        for i in range(out_size)
    ]


def adaptive_avg_pool(x, out_h: int, out_w: int):
    """Adaptive average pooling to (out_h, out_w) with floor/ceil bin edges."""
    x = as_tensor(x)
    _require_rank4(x, "adaptive_avg_pool")
    n, c, h, w = x.shape
    out = np.empty((n, c, out_h, out_w), dtype=np.float64)
    for i, (y0, y1) in enumerate(_adaptive_bins(h, out_h)):
        for j, (x0, x1) in enumerate(_adaptive_bins(w, out_w)):
            out[:, :, i, j] = x[:, :, y0:y1, x0:x1].astype(np.float64).mean(axis=(2, 3))
    return as_tensor(out)


def adaptive_avg_pool_grad(x, grad_out):
    x = as_tensor(x)
    n, c, h, w = x.shape
    out_h, out_w = grad_out.shape[2:]
    g = np.zeros((n, c, h, w), dtype=np.float64)
    for i, (y0, y1) in enumerate(_adaptive_bins(h, out_h)):
        for j, (x0, x1) in enumerate(_adaptive_bins(w, out_w)):
            area = (y1 - y0) * (x1 - x0)
            g[:, :, y0:y1, x0:x1] += grad_out[:, :, i:i + 1, j:j + 1] / area
    return as_tensor(g)


def global_avg_pool(x):
    return adaptive_avg_pool(x, 1, 1)


def global_avg_pool_grad(x, grad_out):
    return adaptive_avg_pool_grad(x, grad_out)


def _interp_matrix(in_size: int, out_size: int, mode: str) -> np.ndarray:
    """Row i holds the weights of output sample i over the input samples."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        if mode == "nearest":
            m[i, min(int(i * scale), in_size - 1)] = 1.0
        else:
            src = max((i + 0.5) * scale - 0.5, 0.0)
            lo = min(int(np.floor(src)), in_size - 1)
            hi = min(lo + 1, in_size - 1)
            frac = src - lo
            m[i, lo] += 1.0 - frac
            m[i, hi] += frac
    return m


def resize(x, out_h: int, out_w: int, mode: str = "nearest"):
    """Nearest or bilinear (half-pixel centres, edge clamp) resize."""
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"Unsupported resize mode: {mode!r}")
    x = as_tensor(x)
    _require_rank4(x, "resize")
    ry = _interp_matrix(x.shape[2], out_h, mode)
    rx = _interp_matrix(x.shape[3], out_w, mode)
    return as_tensor(np.einsum("oh,nchw,pw->ncop", ry, x.astype(np.float64), rx))


def resize_grad(x, grad_out, mode: str = "nearest"):
    x = as_tensor(x)
    out_h, out_w = grad_out.shape[2:]
    ry = _interp_matrix(x.shape[2], out_h, mode)
    rx = _interp_matrix(x.shape[3], out_w, mode)
    return as_tensor(np.einsum("oh,ncop,pw->nchw", ry, grad_out.astype(np.float64), rx))


_FORWARD = {
    "relu": lambda x, **kw: relu(x),
    "sigmoid": lambda x, **kw: sigmoid(x),
    "add": lambda x, other, **kw: add(x, other),
    "max_pool2x2": lambda x, **kw: max_pool2x2(x),
    "global_avg_pool": lambda x, **kw: global_avg_pool(x),
    "adaptive_avg_pool": lambda x, out_h, out_w, **kw: adaptive_avg_pool(x, out_h, out_w),
    "resize_nearest": lambda x, out_h, out_w, **kw: resize(x, out_h, out_w, "nearest"),
    "resize_bilinear": lambda x, out_h, out_w, **kw: resize(x, out_h, out_w, "bilinear"),
}

_BACKWARD = {
    "relu": lambda x, g, **kw: relu_grad(x, g),
    "sigmoid": lambda x, g, **kw: sigmoid_grad(x, g),
    "add": lambda x, g, **kw: add_grad(g),
    "max_pool2x2": lambda x, g, **kw: max_pool2x2_grad(x, g),
    "global_avg_pool": lambda x, g, **kw: global_avg_pool_grad(x, g),
    "adaptive_avg_pool": lambda x, g, **kw: adaptive_avg_pool_grad(x, g),
    "resize_nearest": lambda x, g, **kw: resize_grad(x, g, "nearest"),
    "resize_bilinear": lambda x, g, **kw: resize_grad(x, g, "bilinear"),
}

ELEMENTWISE_KINDS = tuple(_FORWARD)


def elementwise_and_pool(kind: str, x, **params):
    """Dispatch a non-convolution operator by name (see ELEMENTWISE_KINDS)."""
    if kind not in _FORWARD:
        raise ValueError(f"Unsupported operator kind: {kind!r}. Use one of {', '.join(ELEMENTWISE_KINDS)}.")
    return check_finite(_FORWARD[kind](x, **params), kind)


def elementwise_and_pool_grad(kind: str, x, grad_out, **params):
    """Backward counterpart of elementwise_and_pool; `add` returns a pair."""
    if kind not in _BACKWARD:
        raise ValueError(f"Unsupported operator kind: {kind!r}. Use one of {', '.join(ELEMENTWISE_KINDS)}.")
    return _BACKWARD[kind](x, grad_out, **params)


# ---------------------------------------------------------------------------
# RMS optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """Running mean of squared gradients per parameter, plus hyperparameters."""

    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-3
    smoothing: float = 0.99
    eps: float = 1e-8

    def copy(self) -> "OptimState":
        return OptimState(
            {k: v.copy() for k, v in self.square_avg.items()},
            self.step, self.lr, self.weight_decay, self.smoothing, self.eps,
        )


def rmsprop_step(params: dict, grads: dict, state: OptimState):
    """
    One RMSprop step with L2 decay folded into the gradient:

        g <- g + wd*p ;  v <- rho*v + (1-rho)*g^2 ;  p <- p - lr*g/(sqrt(v)+eps)

    Pure: returns (new_params, new_state) without touching the inputs.
    """
    if set(params) != set(grads):
        raise ShapeError(f"params/grads keys differ: {sorted(set(params) ^ set(grads))}")
    rho = state.smoothing
    new_state = state.copy()
    new_state.step += 1
    new_params = {}
    for name in sorted(params):
        p = params[name].astype(np.float64)
        g = grads[name].astype(np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g + state.weight_decay * p
        v = new_state.square_avg.get(name)
        v = np.zeros_like(p) if v is None else v.astype(np.float64)
        v = rho * v + (1.0 - rho) * g * g
        p = p - state.lr * g / (np.sqrt(v) + state.eps)
        new_state.square_avg[name] = as_tensor(v)
        new_params[name] = check_finite(as_tensor(p), f"rmsprop_step[{name}]")
    logger.debug("rmsprop step %d over %d tensors", new_state.step, len(new_params))
    return new_params, new_state


# ---------------------------------------------------------------------------
# BCT1 tensor dump format
# ---------------------------------------------------------------------------

def dumps_tensor(x) -> bytes:
    """Encode as BCT1: magic, u32le rank, u32le extents, f32le data."""
    x = as_tensor(x)
    header = BCT1_MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return header + x.astype("<f4").tobytes()


def loads_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != BCT1_MAGIC:
        raise ValueError("Not a BCT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != offset + 4 * count:
        raise ValueError(f"BCT1 payload length mismatch for shape {shape}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.reshape(shape).astype(DTYPE)


def save_tensor(path: str, x) -> None:
    with open(path, "wb") as f:
        f.write(dumps_tensor(x))


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return loads_tensor(f.read())


# ---------------------------------------------------------------------------
# Parameter container: one BCT1 file per tensor + manifest.txt
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_params(directory: str, params: dict) -> str:
    """Write every tensor as <name>.bct1 plus a `name d0 d1 ...` manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name in sorted(params):
        tensor = as_tensor(params[name])
        save_tensor(os.path.join(directory, f"{name}.bct1"), tensor)
        lines.append(" ".join([name, *(str(d) for d in tensor.shape)]))
    path = os.path.join(directory, MANIFEST)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


def load_params(directory: str, expected: Optional[dict] = None) -> dict:
    """
    Read a parameter container.

    expected: optional name -> shape mapping; any missing, extra or
    mis-shaped tensor raises ValueError naming it.
    """
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Parameter manifest not found: {path}")
    params = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            name, shape = parts[0], tuple(int(d) for d in parts[1:])
            tensor = load_tensor(os.path.join(directory, f"{name}.bct1"))
            if tensor.shape != shape:
                raise ValueError(f"{name}: manifest shape {shape} but file holds {tensor.shape}")
            params[name] = tensor
    if expected is not None:
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ValueError(f"Parameter set mismatch (missing: {missing}, unexpected: {extra})")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise ValueError(f"{name}: expected shape {tuple(shape)}, got {params[name].shape}")
    return params
