"""
src/sparse_video/synthetic.py — Moving-rectangle clips with ground truth.

A clip is a static, low-amplitude noise texture around mid-gray with solid
colored rectangles translating at constant integer velocity. Objects appear
(spawn) and disappear (despawn) at scheduled frames; an object whose box would
come closer than 1 px to the frame border is despawned from that frame on.

All values lie on the 1/255 lattice, so clips written as PPM and read back
are bit-identical to the generated arrays.

Usage:
    from sparse_video.synthetic import SyntheticClipSpec, generate_clip, save_clip

    spec = SyntheticClipSpec.random(seed=3, object_count=3)
    clip = generate_clip(spec, seed=3)
    save_clip(clip, "runs/clips/clip_000")
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from sparse_video.image_io import load_clip_frames, write_index, write_ppm
from sparse_video.tensor_core import DTYPE

logger = logging.getLogger(__name__)

# Object color keys; class 0 is background
CLASS_COLORS = {
    1: (0.9, 0.1, 0.1),
    2: (0.1, 0.8, 0.2),
    3: (0.15, 0.25, 0.9),
}
BACKGROUND_LEVEL = 0.5
NOISE_AMPLITUDE = 0.03
GROUND_TRUTH_FILE = "ground_truth.jsonl"


def quantize(values: np.ndarray) -> np.ndarray:
    return (np.round(np.asarray(values, dtype=np.float64) * 255.0) / 255.0).astype(DTYPE)


@dataclass
class ObjectTrack:
    """One rectangle: top-left (x, y) at its spawn frame, size, velocity in px/frame."""

    object_id: int
    class_id: int
    x: int
    y: int
    width: int
    height: int
    vx: int = 0
    vy: int = 0
    spawn_frame: int = 0
    despawn_frame: Optional[int] = None

    def box_at(self, t: int) -> tuple:
        dt = t - self.spawn_frame
        x1, y1 = self.x + self.vx * dt, self.y + self.vy * dt
        return (x1, y1, x1 + self.width, y1 + self.height)


def _inside(box: tuple, height: int, width: int) -> bool:
    x1, y1, x2, y2 = box
    return x1 >= 1 and y1 >= 1 and x2 <= width - 1 and y2 <= height - 1


@dataclass
class SyntheticClipSpec:
    height: int = 64
    width: int = 128
    frames: int = 20
    objects: list = field(default_factory=list)
    background_seed: int = 0

    def validate(self, block_size: Optional[int] = None) -> "SyntheticClipSpec":
        if self.height < 4 or self.width < 4 or self.frames < 1:
            raise ValueError(f"invalid clip extents {self.height}x{self.width}x{self.frames}")
        if block_size and (self.height % block_size or self.width % block_size):
            raise ValueError(f"block size {block_size} does not divide {self.height}x{self.width}")
        ids = [o.object_id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique")
        for o in self.objects:
            if o.class_id not in CLASS_COLORS:
                raise ValueError(f"object {o.object_id}: unknown class {o.class_id}")
            if o.width < 1 or o.height < 1:
                raise ValueError(f"object {o.object_id}: empty rectangle")
            if not _inside(o.box_at(o.spawn_frame), self.height, self.width):
                raise ValueError(f"object {o.object_id} spawns outside the 1 px frame margin")
        return self

    @classmethod
    def random(cls, seed: int, height: int = 64, width: int = 128, frames: int = 20,
               object_count: int = 3, max_speed: int = 3) -> "SyntheticClipSpec":
        """
        Seeded layout: `object_count` objects from frame 0; for clips of 6+
        frames one more object spawns a third of the way in and the first one
        despawns two thirds of the way in.
        """
        rng = np.random.default_rng(seed)

        def make(object_id: int, spawn: int) -> ObjectTrack:
            w = int(rng.integers(8, min(17, width - 2)))
            h = int(rng.integers(6, min(13, height - 2)))
            x = int(rng.integers(1, width - w))
            y = int(rng.integers(1, height - h))
            vx, vy = (int(v) for v in rng.integers(-max_speed, max_speed + 1, size=2))
            return ObjectTrack(object_id, object_id % len(CLASS_COLORS) + 1, x, y, w, h, vx, vy, spawn)

        objects = [make(i, 0) for i in range(object_count)]
        if frames >= 6:
            objects.append(make(object_count, frames // 3))
            if object_count:
                objects[0].despawn_frame = (2 * frames) // 3
        return cls(height, width, frames, objects, background_seed=seed)


@dataclass
class Clip:
    spec: SyntheticClipSpec
    frames: list
    ground_truth: list    # per frame: list of {frame, object_id, box, class}

    def __len__(self) -> int:
        return len(self.frames)

    def label_map(self, t: int) -> np.ndarray:
        """Per-pixel class id of frame t (0 = background)."""
        labels = np.zeros((self.spec.height, self.spec.width), dtype=np.int64)
        for rec in self.ground_truth[t]:
            x1, y1, x2, y2 = rec["box"]
            labels[y1:y2, x1:x2] = rec["class"]
        return labels


def _background(spec: SyntheticClipSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(3, spec.height, spec.width))
    return quantize(BACKGROUND_LEVEL + noise)


def generate_clip(spec: SyntheticClipSpec, seed: Optional[int] = None) -> Clip:
    """Render frames and per-frame ground truth; `seed` overrides the texture seed."""
    spec.validate()
    background = _background(spec, spec.background_seed if seed is None else seed)
    colors = {c: quantize(rgb)[:, None, None] for c, rgb in CLASS_COLORS.items()}
    gone: set = set()
    frames, truth = [], []
    for t in range(spec.frames):
        frame = background.copy()
        records = []
        for obj in spec.objects:
            if t < obj.spawn_frame or obj.object_id in gone:
                continue
            box = obj.box_at(t)
            if (obj.despawn_frame is not None and t >= obj.despawn_frame) or \
                    not _inside(box, spec.height, spec.width):
                gone.add(obj.object_id)
                logger.debug("object %d despawned at frame %d", obj.object_id, t)
                continue
            x1, y1, x2, y2 = box
            frame[:, y1:y2, x1:x2] = colors[obj.class_id]
            records.append({"frame": t, "object_id": obj.object_id, "box": list(box), "class": obj.class_id})
        frames.append(frame)
        truth.append(records)
    return Clip(spec, frames, truth)


def generate_clips(count: int, seed: int, height: int = 64, width: int = 128, frames: int = 20,
                   object_count: int = 3, max_speed: int = 3) -> list[Clip]:
    """`count` independent clips; clip i uses seed `seed * 1000 + i`."""
    return [
        generate_clip(SyntheticClipSpec.random(seed * 1000 + i, height, width, frames, object_count, max_speed))
        for i in range(count)
    ]


def save_clip(clip: Clip, clip_dir: str) -> None:
    os.makedirs(clip_dir, exist_ok=True)
    names = []
    for t, frame in enumerate(clip.frames):
        name = f"frame_{t:04d}.ppm"
        write_ppm(os.path.join(clip_dir, name), frame)
        names.append(name)
    write_index(clip_dir, names)
    with open(os.path.join(clip_dir, GROUND_TRUTH_FILE), "w") as f:
        for records in clip.ground_truth:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_clip(clip_dir: str) -> Clip:
    frames = load_clip_frames(clip_dir)
    truth: list = [[] for _ in frames]
    gt_path = os.path.join(clip_dir, GROUND_TRUTH_FILE)
    if os.path.exists(gt_path):
        with open(gt_path) as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    truth[rec["frame"]].append(rec)
    _, h, w = frames[0].shape
    return Clip(SyntheticClipSpec(h, w, len(frames)), frames, truth)


def list_clip_dirs(root: str) -> list[str]:
    """Sub-directories of `root` holding a clip index, sorted by name."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"Clip directory not found: {root}")
    return [
        os.path.join(root, name) for name in sorted(os.listdir(root))
        if os.path.exists(os.path.join(root, name, "index.txt"))
    ]
