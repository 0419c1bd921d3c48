"""
src/sparse_video/tasks.py — Frozen task backends and desk-scale metrics.

Backends (selected by id):
    toy-det      small conv detector (center heatmap + size head) executed
                 block-sparsely over feature canvases; decoded densely.
    oracle-det   color-key connected components of the frame-state composite.
    oracle-inst  oracle-det plus per-instance masks (mask IoU in the gain).
    oracle-seg   per-pixel class distribution from color keys.

Oracle backends read the composite frame state, never the true frame, so
regions that were not re-executed keep producing stale outputs.
execute_lowres runs any backend densely on a shrunk frame for the
lower-resolution baseline.

Usage:
    from sparse_video.tasks import make_backend, evaluate

    backend = make_backend(cfg)
    out = backend.execute(frame_state, frame, actions, canvas, grid, counter)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from config import RunConfig
from sparse_video.block_runtime import (
    ActionGrid,
    BlockGrid,
    BlockSparseNetwork,
    FeatureCanvas,
    LayerDef,
    MacCounter,
)
from sparse_video.info_gain import Detection, IGMap, ig_detection, ig_semseg, iou
from sparse_video.synthetic import CLASS_COLORS, Clip
from sparse_video.tensor_core import (
    DTYPE,
    ConvSpec,
    conv2d,
    conv2d_grad,
    he_init,
    load_params,
    resize,
    save_params,
    sigmoid,
)

logger = logging.getLogger(__name__)

COLOR_TOLERANCE = 0.15
ORACLE_MATCH_PROB = 0.9
MIN_ORACLE_SCORE = 0.5
TOY_SIZE_UNIT = 8.0


@dataclass
class TaskOutput:
    """Detections (detection/instance tasks) or a (C, H, W) class distribution."""

    detections: Optional[list] = None
    probs: Optional[np.ndarray] = None

    @property
    def is_detection(self) -> bool:
        return self.detections is not None

    def as_record(self) -> dict:
        if self.is_detection:
            return {"detections": [d.as_record() for d in self.detections]}
        return {"labels": np.bincount(self.probs.argmax(axis=0).ravel(),
                                      minlength=self.probs.shape[0]).tolist()}


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def color_labels(image: np.ndarray, tolerance: float = COLOR_TOLERANCE) -> np.ndarray:
    """Class id per pixel of a (3, H, W) image: the color key within tolerance, else 0."""
    labels = np.zeros(image.shape[1:], dtype=np.int64)
    for class_id, rgb in CLASS_COLORS.items():
        diff = np.abs(image - np.asarray(rgb, dtype=DTYPE)[:, None, None]).max(axis=0)
        labels[diff <= tolerance] = class_id
    return labels


def oracle_detector(frame_state: np.ndarray, with_masks: bool = False) -> list[Detection]:
    """
    Tight boxes around 4-connected components of each color key.

    score = component pixels / box area, clipped to [0.5, 1]. Ordered by class,
    then by label index (raster order of the first pixel).
    """
    labels = color_labels(frame_state)
    detections = []
    for class_id in sorted(CLASS_COLORS):
        components, count = ndimage.label(labels == class_id)
        if not count:
            continue
        for index, slices in enumerate(ndimage.find_objects(components), 1):
            ys, xs = slices
            patch = components[ys, xs] == index
            box = (xs.start, ys.start, xs.stop, ys.stop)
            score = float(np.clip(patch.sum() / patch.size, MIN_ORACLE_SCORE, 1.0))
            mask = None
            if with_masks:
                mask = np.zeros(labels.shape, dtype=bool)
                mask[ys, xs] = patch
            detections.append(Detection(box, score, class_id, mask))
    return detections


def oracle_segmenter(frame_state: np.ndarray, num_classes: int) -> np.ndarray:
    """0.9 on the color-matched class (0 = background), the rest spread evenly."""
    labels = color_labels(frame_state)
    labels[labels >= num_classes] = 0
    rest = (1.0 - ORACLE_MATCH_PROB) / (num_classes - 1)
    probs = np.full((num_classes,) + labels.shape, rest, dtype=np.float64)
    np.put_along_axis(probs, labels[None], ORACLE_MATCH_PROB, axis=0)
    return probs


# ---------------------------------------------------------------------------
# Toy detector
# ---------------------------------------------------------------------------

TRUNK_WIDTHS = (8, 16, 16, 16)


def toy_detector_params(seed: int) -> dict[str, np.ndarray]:
    """He-initialised weights, zero biases (an all-zero input decodes to no detections)."""
    rng = np.random.default_rng(seed)
    c1, c2, c3, c4 = TRUNK_WIDTHS
    shapes = {"c1": (c1, 3, 3), "c2": (c2, c1, 3), "c3": (c3, c2, 3), "c4": (c4, c3, 3),
              "heat": (1, c2, 1), "size": (2, c2, 1)}
    params = {}
    for name, (out_c, in_c, k) in shapes.items():
        params[f"{name}.weight"] = he_init(rng, out_c, in_c, k)
        params[f"{name}.bias"] = np.zeros(out_c, dtype=DTYPE)
    return params


def toy_detector_layers(params: dict) -> list[LayerDef]:
    """
    c1 3x3 -> pool -> c2 3x3 -> c3 3x3/2 -> c4 3x3 (+c3) -> nearest x2 (+c2)
    -> heat 1x1 (sigmoid) / size 1x1. Two downsamplings; heads at 1/2 scale.
    """
    def conv(name, stride=1, padding=1):
        return ConvSpec.create(params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=padding)

    return [
        LayerDef("c1", "conv", ("input",), conv("c1"), "relu"),
        LayerDef("p1", "max_pool2x2", ("c1",)),
        LayerDef("c2", "conv", ("p1",), conv("c2"), "relu"),
        LayerDef("c3", "conv", ("c2",), conv("c3", stride=2), "relu"),
        LayerDef("c4", "conv", ("c3",), conv("c4")),
        LayerDef("r4", "add", ("c4", "c3"), activation="relu"),
        LayerDef("up", "upsample_nearest", ("r4",)),
        LayerDef("fuse", "add", ("up", "c2")),
        LayerDef("heat", "conv", ("fuse",), conv("heat", padding=0), "sigmoid"),
        LayerDef("size", "conv", ("fuse",), conv("size", padding=0)),
    ]


def nms(detections: list[Detection], threshold: float) -> list[Detection]:
    """Greedy: keep the best remaining box, drop every other box overlapping it by more than `threshold`."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    keep = []
    while order:
        best = order.pop(0)
        keep.append(detections[best])
        order = [i for i in order if iou(detections[best], detections[i]) <= threshold]
    return keep


def decode_heatmap(heat: np.ndarray, size: np.ndarray, height: int, width: int,
                   threshold: float = 0.5, nms_iou: float = 0.5, stride: int = 2) -> list[Detection]:
    """
    3x3 local maxima of the center heatmap strictly above `threshold` become
    boxes sized by exp(size) * 8 px; greedy NMS removes duplicates.
    """
    heat = np.asarray(heat, dtype=np.float64)
    peaks = (heat == ndimage.maximum_filter(heat, size=3, mode="constant", cval=-np.inf)) & (heat > threshold)
    candidates = []
    for i, j in zip(*np.nonzero(peaks)):
        cx, cy = stride * j + stride / 2.0, stride * i + stride / 2.0
        bw = TOY_SIZE_UNIT * float(np.exp(np.clip(size[0, i, j], -3.0, 3.0)))
        bh = TOY_SIZE_UNIT * float(np.exp(np.clip(size[1, i, j], -3.0, 3.0)))
        x1, x2 = int(round(max(cx - bw / 2, 0))), int(round(min(cx + bw / 2, width)))
        y1, y2 = int(round(max(cy - bh / 2, 0))), int(round(min(cy + bh / 2, height)))
        if x2 > x1 and y2 > y1:
            candidates.append(Detection((x1, y1, x2, y2), float(heat[i, j]), 1))
    return nms(candidates, nms_iou)


class ToyDetector:
    """Frozen conv detector whose trunk and heads run through the block-sparse runtime."""

    def __init__(self, params: dict, score_threshold: float = 0.5, nms_iou: float = 0.5):
        self.params = params
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.network = BlockSparseNetwork(toy_detector_layers(params), in_channels=3)

    @classmethod
    def from_seed(cls, seed: int, **kwargs) -> "ToyDetector":
        return cls(toy_detector_params(seed), **kwargs)

    @classmethod
    def from_dir(cls, directory: str, **kwargs) -> "ToyDetector":
        expected = {k: v.shape for k, v in toy_detector_params(0).items()}
        return cls(load_params(directory, expected), **kwargs)

    def save(self, directory: str) -> str:
        return save_params(directory, self.params)

    def decode(self, heat: np.ndarray, size: np.ndarray) -> list[Detection]:
        h, w = heat.shape[2] * 2, heat.shape[3] * 2
        return decode_heatmap(heat[0, 0], size[0], h, w, self.score_threshold, self.nms_iou)

    def forward_dense(self, frame: np.ndarray) -> tuple[list[Detection], dict]:
        acts = self.network.run_dense(frame[None] if frame.ndim == 3 else frame)
        return self.decode(acts["heat"], acts["size"]), acts

    def forward_sparse(self, frame: np.ndarray, actions: ActionGrid, canvas: FeatureCanvas,
                       grid: BlockGrid, counter: Optional[MacCounter] = None) -> list[Detection]:
        self.network.run_sparse(frame, actions, canvas, grid, counter)
        return self.decode(canvas["heat"], canvas["size"])


def fit_heat_head(detector: ToyDetector, clips: list[Clip], steps: int = 200,
                  lr: float = 0.5) -> ToyDetector:
    """
    Offline fit of the detector heads on frozen trunk features.

    The heat head is a logistic regression (gradient descent through
    conv2d_grad) towards 1 at ground-truth box centers; the size head is a
    least-squares fit of log box size at those centers. Returns a new detector.
    """
    features, targets, size_rows, size_targets = [], [], [], []
    for clip in clips:
        for t, frame in enumerate(clip.frames):
            fuse = detector.network.run_dense(frame[None])["fuse"]
            target = np.zeros((1, 1) + fuse.shape[2:], dtype=DTYPE)
            for rec in clip.ground_truth[t]:
                x1, y1, x2, y2 = rec["box"]
                i = min((y1 + y2) // 4, fuse.shape[2] - 1)
                j = min((x1 + x2) // 4, fuse.shape[3] - 1)
                target[0, 0, i, j] = 1.0
                size_rows.append(fuse[0, :, i, j])
                size_targets.append(np.log([(x2 - x1) / TOY_SIZE_UNIT, (y2 - y1) / TOY_SIZE_UNIT]))
            features.append(fuse)
            targets.append(target)
    if not features:
        raise ValueError("fit_heat_head needs at least one frame")
    x = np.concatenate(features)
    y = np.concatenate(targets)
    params = {k: v.copy() for k, v in detector.params.items()}
    positive_weight = max(float((y == 0).sum()) / max(float(y.sum()), 1.0), 1.0)
    for step in range(steps):
        spec = ConvSpec.create(params["heat.weight"], params["heat.bias"])
        p = sigmoid(conv2d(x, spec)).astype(np.float64)
        weights = np.where(y > 0, positive_weight, 1.0)
        grad = (weights * (p - y) / y.size).astype(DTYPE)
        _, gw, gb = conv2d_grad(x, spec, grad)
        params["heat.weight"] = (params["heat.weight"] - lr * gw).astype(DTYPE)
        params["heat.bias"] = (params["heat.bias"] - lr * gb).astype(DTYPE)
        if step % 50 == 0:
            logger.debug("heat head fit step %d", step)
    if size_rows:
        a = np.concatenate([np.asarray(size_rows, dtype=np.float64), np.ones((len(size_rows), 1))], axis=1)
        solution, *_ = np.linalg.lstsq(a, np.asarray(size_targets), rcond=None)
        params["size.weight"] = solution[:-1].T.reshape(params["size.weight"].shape).astype(DTYPE)
        params["size.bias"] = solution[-1].astype(DTYPE)
    return ToyDetector(params, detector.score_threshold, detector.nms_iou)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

@dataclass
class TaskBackend:
    """Uniform face of a task family for the pipeline."""

    name: str
    num_classes: int
    class_aware: bool = False
    detector: Optional[ToyDetector] = None
    depth: int = 0

    @property
    def is_detection(self) -> bool:
        return self.name != "oracle-seg"

    @property
    def output_channels(self) -> int:
        """K: one channel per object class for detection tasks, C for segmentation."""
        if self.name == "toy-det":
            return 1
        return self.num_classes - 1 if self.is_detection else self.num_classes

    def new_canvas(self, grid: BlockGrid) -> Optional[FeatureCanvas]:
        return self.detector.network.new_canvas(grid) if self.detector else None

    def dense_macs(self, grid: BlockGrid) -> int:
        return self.detector.network.dense_macs(grid) if self.detector else 0

    def execute(self, frame_state: np.ndarray, frame: np.ndarray, actions: ActionGrid,
                canvas: Optional[FeatureCanvas], grid: BlockGrid,
                counter: Optional[MacCounter] = None) -> TaskOutput:
        """Composite output for this frame; oracles cost no MACs."""
        if self.name == "toy-det":
            return TaskOutput(detections=self.detector.forward_sparse(frame, actions, canvas, grid, counter))
        if self.name == "oracle-seg":
            return TaskOutput(probs=oracle_segmenter(frame_state, self.num_classes))
        return TaskOutput(detections=oracle_detector(frame_state, with_masks=self.name == "oracle-inst"))

    def render(self, output: TaskOutput, height: int, width: int) -> np.ndarray:
        """(K, H, W) policy channels: score-filled boxes/masks per class, or the distribution."""
        if not output.is_detection:
            return output.probs.astype(DTYPE)
        channels = np.zeros((self.output_channels, height, width), dtype=DTYPE)
        for det in output.detections:
            k = 0 if self.output_channels == 1 else det.class_id - 1
            if not 0 <= k < self.output_channels:
                continue
            if det.mask is not None:
                channels[k][det.mask] = np.maximum(channels[k][det.mask], det.score)
            else:
                x1, y1, x2, y2 = det.box
                region = channels[k, y1:y2, x1:x2]
                np.maximum(region, det.score, out=region)
        return channels

    def information_gain(self, curr: TaskOutput, prev: TaskOutput, height: int, width: int) -> IGMap:
        if not self.is_detection:
            return ig_semseg(curr.probs, prev.probs)
        mode = "mask" if self.name == "oracle-inst" else "box"
        return ig_detection(curr.detections, prev.detections, height, width, mode, self.class_aware)

    def execute_lowres(self, frame: np.ndarray, factor: int,
                       counter: Optional[MacCounter] = None) -> TaskOutput:
        """
        Dense execution on the frame shrunk by `factor` (bilinear), with the
        output mapped back to full resolution. Reads the true frame; no canvas.
        """
        _, height, width = frame.shape
        if factor < 1 or height % factor or width % factor:
            raise ValueError(f"scale factor {factor} must divide the frame extents {height}x{width}")
        small = resize(frame[None], height // factor, width // factor, "bilinear")[0]
        if self.name == "oracle-seg":
            probs = oracle_segmenter(small, self.num_classes)
            return TaskOutput(probs=np.repeat(np.repeat(probs, factor, axis=1), factor, axis=2))
        if self.name == "toy-det":
            detections, _ = self.detector.forward_dense(small)
            if counter is not None:
                lh, lw = small.shape[1:]
                counter.add("task", self.detector.network.dense_macs(BlockGrid(lh, lw, math.gcd(lh, lw), self.depth)))
        else:
            detections = oracle_detector(small, with_masks=self.name == "oracle-inst")
        return TaskOutput(detections=scale_detections(detections, factor, height, width))


def scale_detections(detections: list[Detection], factor: int, height: int, width: int) -> list[Detection]:
    """Map detections found on a frame shrunk by `factor` back onto the full height x width frame."""
    scaled = []
    for det in detections:
        x1, y1, x2, y2 = det.box
        mask = None
        if det.mask is not None:
            mask = np.repeat(np.repeat(det.mask, factor, axis=0), factor, axis=1)[:height, :width]
        box = (x1 * factor, y1 * factor, min(x2 * factor, width), min(y2 * factor, height))
        scaled.append(Detection(box, det.score, det.class_id, mask))
    return scaled


def make_backend(cfg: RunConfig, detector: Optional[ToyDetector] = None) -> TaskBackend:
    if cfg.task == "toy-det":
        detector = detector or ToyDetector.from_seed(cfg.seed, score_threshold=cfg.score_threshold,
                                                     nms_iou=cfg.nms_iou)
        return TaskBackend(cfg.task, cfg.num_classes, cfg.class_aware_matching, detector,
                           detector.network.depth)
    return TaskBackend(cfg.task, cfg.num_classes, cfg.class_aware_matching)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class DetectionMetrics:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0

    @property
    def precision(self) -> float:
        total = self.true_positives + self.false_positives
        return self.true_positives / total if total else 1.0

    @property
    def recall(self) -> float:
        total = self.true_positives + self.false_negatives
        return self.true_positives / total if total else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def match_detections(pred: list[Detection], truth: list[Detection], iou_threshold: float = 0.5,
                     score_threshold: float = 0.5, class_aware: bool = False) -> DetectionMetrics:
    """Greedy matching in descending score order; each ground-truth box matches at most once."""
    kept = sorted((d for d in pred if d.score >= score_threshold), key=lambda d: -d.score)
    used = [False] * len(truth)
    tp = 0
    for det in kept:
        best, best_iou = None, 0.0
        for j, gt in enumerate(truth):
            if used[j] or (class_aware and gt.class_id != det.class_id):
                continue
            value = iou(det, gt)
            if value >= iou_threshold and (best is None or value > best_iou):
                best, best_iou = j, value
        if best is not None:
            used[best] = True
            tp += 1
    return DetectionMetrics(tp, len(kept) - tp, len(truth) - tp)


def mean_iou(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean IoU over classes present in prediction or ground truth (1.0 if none)."""
    pred = probs.argmax(axis=0)
    scores = []
    for c in range(probs.shape[0]):
        union = np.logical_or(pred == c, labels == c).sum()
        if union:
            scores.append(np.logical_and(pred == c, labels == c).sum() / union)
    return float(np.mean(scores)) if scores else 1.0


def truth_detections(records: list[dict]) -> list[Detection]:
    return [Detection(tuple(r["box"]), 1.0, r["class"]) for r in records]


@dataclass
class EvaluationReport:
    per_frame: list = field(default_factory=list)

    @property
    def mean(self) -> dict:
        if not self.per_frame:
            return {}
        return {k: float(np.mean([m[k] for m in self.per_frame])) for k in self.per_frame[0]}


def evaluate(preds: list[TaskOutput], clip: Clip, score_threshold: float = 0.5,
             class_aware: bool = False) -> EvaluationReport:
    """Per-frame and clip-averaged metrics against a clip's ground truth."""
    if len(preds) != len(clip.ground_truth):
        raise ValueError(f"misaligned streams: {len(preds)} predictions vs {len(clip.ground_truth)} frames")
    report = EvaluationReport()
    for t, out in enumerate(preds):
        if out.is_detection:
            truth = truth_detections(clip.ground_truth[t])
            metrics = match_detections(out.detections, truth, 0.5, score_threshold, class_aware)
            report.per_frame.append(metrics.as_dict())
        else:
            report.per_frame.append({"miou": mean_iou(out.probs, clip.label_map(t))})
    return report
