"""
src/sparse_video/image_io.py — Binary PPM (P6) / PGM (P5) frames and clip index files.

Frames are float32 arrays in [0,1] with shape (3, H, W) (RGB) or (H, W) (gray).
On disk they are stored as 8-bit binary portable pixmaps: quantisation is
round-half-up of value*255, so frames generated on the 1/255 lattice survive
a write/read cycle bit-exactly.

Usage:
    from sparse_video.image_io import write_ppm, read_ppm, write_index

    write_ppm("clip_000/frame_0000.ppm", frame)
    frame = read_ppm("clip_000/frame_0000.ppm")
"""

import os

import numpy as np

from sparse_video.tensor_core import DTYPE, ShapeError

INDEX_FILE = "index.txt"


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _write_netpbm(path: str, magic: bytes, height: int, width: int, payload: bytes) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (width, height))
        f.write(payload)


def _read_netpbm(path: str, expected_magic: bytes) -> tuple[int, int, bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != expected_magic:
        raise ValueError(f"{path}: expected {expected_magic.decode()} image, found {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    return height, width, raw[pos + 1:]


def write_ppm(path: str, frame: np.ndarray) -> None:
    """Write a (3,H,W) [0,1] frame as binary P6."""
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"PPM frames must be (3, H, W), got {frame.shape}")
    _, h, w = frame.shape
    _write_netpbm(path, b"P6", h, w, to_uint8(frame).transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    h, w, data = _read_netpbm(path, b"P6")
    pixels = np.frombuffer(data[:h * w * 3], dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(DTYPE) / np.float32(255.0)).astype(DTYPE)


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write an (H,W) [0,1] map as binary P5; values outside [0,1] are clipped."""
    if image.ndim != 2:
        raise ShapeError(f"PGM images must be (H, W), got {image.shape}")
    h, w = image.shape
    _write_netpbm(path, b"P5", h, w, to_uint8(image).tobytes())


def read_pgm(path: str) -> np.ndarray:
    h, w, data = _read_netpbm(path, b"P5")
    return np.frombuffer(data[:h * w], dtype=np.uint8).reshape(h, w).astype(DTYPE) / np.float32(255.0)


def outline_blocks(frame: np.ndarray, decisions: np.ndarray, block_size: int,
                   color: tuple = (1.0, 1.0, 0.0)) -> np.ndarray:
    """Copy of an RGB frame with a 1 px outline drawn around every executed block."""
    out = frame.copy()
    rgb = np.asarray(color, dtype=DTYPE)[:, None]
    for r, c in zip(*np.nonzero(decisions)):
        y0, x0 = r * block_size, c * block_size
        y1, x1 = y0 + block_size - 1, x0 + block_size - 1
        out[:, y0, x0:x1 + 1] = rgb
        out[:, y1, x0:x1 + 1] = rgb
        out[:, y0:y1 + 1, x0] = rgb
        out[:, y0:y1 + 1, x1] = rgb
    return out


def write_index(clip_dir: str, frame_files: list[str]) -> str:
    """Index file: one frame file name per line, in frame order."""
    path = os.path.join(clip_dir, INDEX_FILE)
    with open(path, "w") as f:
        f.write("".join(f"{name}\n" for name in frame_files))
    return path


def read_index(clip_dir: str) -> list[str]:
    path = os.path.join(clip_dir, INDEX_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Clip index not found: {path}")
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def load_clip_frames(clip_dir: str) -> list[np.ndarray]:
    return [read_ppm(os.path.join(clip_dir, name)) for name in read_index(clip_dir)]
