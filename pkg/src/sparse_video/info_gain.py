"""
src/sparse_video/info_gain.py — Information Gain between consecutive task outputs.

Detection / instance outputs: greedy best-IoU matching of every current
detection against the previous output; the unmatched remainder of a box
(1 - IoU) scaled by its score becomes the per-pixel gain, written over both
the current box and its match. Previous detections never chosen as a match
contribute their full score (they should disappear).

Semantic segmentation: pixelwise KL(current || previous).

Per-block values are the max over each block's pixels.

Usage:
    from sparse_video.info_gain import Detection, ig_detection, block_maxpool

    ig = ig_detection(curr, prev, 64, 128)
    per_block = block_maxpool(ig.pixels, grid)
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from sparse_video.block_runtime import BlockGrid
from sparse_video.image_io import write_pgm

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-8
ROW_SUM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class Detection:
    """Scored box (x1, y1, x2, y2), half-open pixel coordinates, optional instance mask."""

    box: tuple
    score: float
    class_id: int = 0
    mask: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        x1, y1, x2, y2 = (int(v) for v in self.box)
        object.__setattr__(self, "box", (x1, y1, x2, y2))
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"Degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Detection score {self.score} outside [0, 1]")

    @property
    def area(self) -> int:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)

    def as_record(self) -> dict:
        return {"box": list(self.box), "score": round(float(self.score), 6), "class": self.class_id}


DetectionSet = list


@dataclass
class IGMap:
    """Per-pixel gain and, once reduced, its Gh x Gw per-block max."""

    pixels: np.ndarray
    blocks: Optional[np.ndarray] = None
    ops: int = 0

    def reduce(self, grid: BlockGrid) -> np.ndarray:
        self.blocks = block_maxpool(self.pixels, grid)
        self.ops += self.pixels.size
        return self.blocks

    def to_pgm(self, path: str) -> None:
        write_pgm(path, self.pixels)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def iou(a: Detection, b: Detection, mode: str = "box") -> float:
    """Intersection over union of boxes (mode="box") or instance masks (mode="mask")."""
    if mode == "mask":
        if a.mask is None or b.mask is None:
            raise ValueError("mask IoU requested for a detection without a mask")
        union = np.logical_or(a.mask, b.mask).sum()
        if union == 0:
            return 0.0
        return float(np.logical_and(a.mask, b.mask).sum() / union)
    if mode != "box":
        raise ValueError(f"Unknown IoU mode: {mode!r}")
    ax1, ay1, ax2, ay2 = a.box
    bx1, by1, bx2, by2 = b.box
    iw = max(0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def best_match(det: Detection, prev: DetectionSet, mode: str = "box",
               class_aware: bool = False) -> tuple[Optional[int], float]:
    """
    Index of the previous detection overlapping `det` most, and that IoU.

    Strictly positive IoU is required; equal IoUs prefer the higher score,
    then the lower index. Returns (None, 0.0) when nothing overlaps.
    """
    best_idx, best_iou = None, 0.0
    for j, candidate in enumerate(prev):
        if class_aware and candidate.class_id != det.class_id:
            continue
        value = iou(det, candidate, mode)
        if value > best_iou or (
            best_idx is not None and value == best_iou and candidate.score > prev[best_idx].score
        ):
            best_idx, best_iou = j, value
    return best_idx, best_iou


def _fill_max(ig: np.ndarray, box: tuple, value: float) -> int:
    x1, y1, x2, y2 = box
    h, w = ig.shape
    region = ig[max(y1, 0):min(y2, h), max(x1, 0):min(x2, w)]
    np.maximum(region, value, out=region)
    return region.size


def ig_detection(curr: DetectionSet, prev: DetectionSet, height: int, width: int,
                 mode: str = "box", class_aware: bool = False) -> IGMap:
    """
    Per-pixel information gain between two detection sets.

    mode="mask" matches instances by mask IoU; the gain is always filled over
    the bounding boxes. Every write is a max-combination, so the result is
    independent of detection order. A previous detection may be the best match
    of several current detections.
    """
    ig = np.zeros((height, width), dtype=np.float64)
    processed = np.zeros(len(prev), dtype=bool)
    ops = 0
    for det in curr:
        j, best_iou = best_match(det, prev, mode, class_aware)
        ops += len(prev)
        ops += _fill_max(ig, det.box, (1.0 - best_iou) * det.score)
        if j is not None:
            processed[j] = True
            ops += _fill_max(ig, prev[j].box, (1.0 - best_iou) * prev[j].score)
    for j, prev_det in enumerate(prev):
        if not processed[j]:
            ops += _fill_max(ig, prev_det.box, prev_det.score)
    logger.debug("ig_detection: %d current, %d previous, %d unmatched, max %.4f",
                 len(curr), len(prev), int((~processed).sum()), ig.max() if ig.size else 0.0)
    return IGMap(ig, ops=ops)


def ig_semseg(curr: np.ndarray, prev: np.ndarray) -> IGMap:
    """Pixelwise KL(curr || prev) over (C, H, W) class distributions."""
    curr = np.asarray(curr, dtype=np.float64)
    prev = np.asarray(prev, dtype=np.float64)
    if curr.shape != prev.shape:
        raise ValueError(f"ProbMap shape mismatch: {curr.shape} vs {prev.shape}")
    if curr.ndim != 3:
        raise ValueError(f"ProbMap must be (C, H, W), got {curr.shape}")
    for name, pm in (("current", curr), ("previous", prev)):
        err = np.abs(pm.sum(axis=0) - 1.0).max()
        if err > ROW_SUM_TOLERANCE:
            raise ValueError(f"{name} ProbMap rows do not sum to 1 (max deviation {err:.2e})")
    p = np.clip(curr, PROB_CLAMP, 1.0)
    q = np.clip(prev, PROB_CLAMP, 1.0)
    kl = np.maximum((p * np.log(p / q)).sum(axis=0), 0.0)
    return IGMap(kl, ops=3 * curr.size)


def block_maxpool(pixels: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """Gh x Gw maximum of a pixel map over each block."""
    bs = grid.block_size
    h, w = pixels.shape
    if h % bs or w % bs:
        raise ValueError(f"map {h}x{w} not divisible by block size {bs}")
    if (h, w) != (grid.height, grid.width):
        raise ValueError(f"map {h}x{w} does not match grid {grid.height}x{grid.width}")
    return pixels.reshape(h // bs, bs, w // bs, bs).max(axis=(1, 3))

