"""
src/sparse_video/pipeline.py — Clip orchestration: policy → sparse task → gain → reward → update.

Frame 0 of every clip runs densely and records no policy loss. Every later
frame goes through these stages:

    policy        assemble state, forward, sample the ActionGrid
    gather        refresh the frame-state composite on executed blocks
    task          block-sparse task execution, composite output
    info_gain     gain against the previous output, per-block max
    update        cost average, rewards, REINFORCE loss, scheduled step

Any stage error aborts the clip with a StageError naming the stage.

Usage:
    from sparse_video.pipeline import SparseVideoPipeline, warmup, write_report

    pipe = SparseVideoPipeline(cfg)
    run = pipe.run_clip(clip)
    write_report(run.records, "runs/run.jsonl")
"""

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from config import JSONL_SCHEMA_VERSION, RunConfig
from sparse_video.block_runtime import (
    ActionGrid,
    BlockGrid,
    FeatureCanvas,
    MacCounter,
    gather_blocks,
    scatter_blocks,
)
from sparse_video.info_gain import IGMap
from sparse_video.policy import (
    Decision,
    OnlinePolicy,
    action_rng,
    assemble_state,
    sample_actions,
    state_channels,
)
from sparse_video.synthetic import Clip
from sparse_video.tasks import TaskBackend, TaskOutput, evaluate, make_backend
from sparse_video.tensor_core import as_tensor

logger = logging.getLogger(__name__)

POLICY_STREAM = 0
BASELINE_STREAM = 1
TIMING_KEYS = ("time_policy", "time_gather_scatter", "time_task", "time_ig", "time_update")


class StageError(RuntimeError):
    """A pipeline stage failed; `stage` names it and the cause is chained."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@contextmanager
def _stage(name: str, timings: Optional[dict] = None, key: Optional[str] = None):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    finally:
        if timings is not None and key:
            timings[key] = timings.get(key, 0.0) + time.perf_counter() - start


# ---------------------------------------------------------------------------
# Action sources
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionSource:
    """
    Where decisions come from on frames >= 1.

    policy   sampled from the online policy
    all      every block (dense reference)
    forced   the first floor(fraction * B) blocks of a seeded permutation
    random   seeded Bernoulli(fraction) per block
    skip     every block on frames divisible by `period`, none otherwise
             (lower frame rate; skipped frames repeat the last output)
    """

    mode: str = "policy"
    fraction: float = 1.0
    period: int = 1

    def __post_init__(self):
        if self.mode not in ("policy", "all", "forced", "random", "skip"):
            raise ValueError(f"Unknown action source: {self.mode!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"action fraction must lie in [0, 1], got {self.fraction}")
        if self.period < 1:
            raise ValueError(f"skip period must be >= 1, got {self.period}")

    def actions(self, grid: BlockGrid, rng: np.random.Generator, frame_index: int) -> ActionGrid:
        if self.mode == "all":
            return ActionGrid.ones(grid, frame_index)
        if self.mode == "skip":
            if frame_index % self.period:
                return ActionGrid.zeros(grid, frame_index)
            return ActionGrid.ones(grid, frame_index)
        if self.mode == "random":
            return sample_actions(np.full((grid.gh, grid.gw), self.fraction), rng, frame_index)
        count = int(np.floor(self.fraction * grid.num_blocks))
        decisions = np.zeros(grid.num_blocks, dtype=np.uint8)
        decisions[rng.permutation(grid.num_blocks)[:count]] = 1
        return ActionGrid(decisions.reshape(grid.gh, grid.gw), frame_index)


# ---------------------------------------------------------------------------
# Clip state
# ---------------------------------------------------------------------------

@dataclass
class ClipRun:
    """Frame-loop state of one clip plus its per-frame records."""

    clip_index: int
    frame_state: Optional[np.ndarray] = None
    prev_frame: Optional[np.ndarray] = None
    canvas: Optional[FeatureCanvas] = None
    prev_output: Optional[TaskOutput] = None
    prev_actions: Optional[ActionGrid] = None
    last_full_frame: int = 0
    records: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    ig_maps: list = field(default_factory=list)


def moving_object_blocks(clip: Clip, t: int, grid: BlockGrid) -> np.ndarray:
    """Gh x Gw mask of blocks touched by objects that moved or appeared since frame t-1."""
    previous = {r["object_id"]: r["box"] for r in clip.ground_truth[t - 1]} if t else {}
    mask = np.zeros((grid.gh, grid.gw), dtype=bool)
    bs = grid.block_size
    for rec in clip.ground_truth[t]:
        if previous.get(rec["object_id"]) == rec["box"]:
            continue
        x1, y1, x2, y2 = rec["box"]
        mask[y1 // bs:(y2 - 1) // bs + 1, x1 // bs:(x2 - 1) // bs + 1] = True
    return mask


def _round(value: float) -> float:
    return round(float(value), 9)


class SparseVideoPipeline:
    """One task backend, one grid, one (online) policy; clips run strictly sequentially."""

    def __init__(self, cfg: RunConfig, backend: Optional[TaskBackend] = None,
                 policy: Optional[OnlinePolicy] = None, source: Optional[ActionSource] = None):
        self.cfg = cfg
        self.backend = backend or make_backend(cfg)
        self.grid = BlockGrid(cfg.frame_height, cfg.frame_width, cfg.block_size, self.backend.depth)
        self.source = source or ActionSource()
        in_channels = state_channels(tuple(cfg.policy_inputs), self.backend.output_channels)
        self.policy = policy or OnlinePolicy(in_channels, cfg)
        self.dense_macs = self.backend.dense_macs(self.grid)

    def start_clip(self, clip_index: int = 0) -> ClipRun:
        self.policy.start_clip()
        return ClipRun(clip_index, canvas=self.backend.new_canvas(self.grid))

    # -- frame loop ---------------------------------------------------------

    def _decide(self, t: int, frame: np.ndarray, run: ClipRun, timings: dict,
                counter: MacCounter) -> tuple[ActionGrid, Optional[Decision]]:
        grid, cfg = self.grid, self.cfg
        if t == 0:
            return ActionGrid.ones(grid, 0), None
        if self.source.mode != "policy":
            rng = action_rng(cfg.seed, run.clip_index, t, BASELINE_STREAM)
            return self.source.actions(grid, rng, t), None
        with _stage("policy", timings, "time_policy"):
            output_channels = self.backend.render(run.prev_output, grid.height, grid.width)
            state = assemble_state(frame, run.frame_state, output_channels, run.prev_actions, grid,
                                   tuple(cfg.policy_inputs), run.prev_frame)
            rng = action_rng(cfg.seed, run.clip_index, t, POLICY_STREAM)
            decision = self.policy.decide(state, grid, rng, t)
            counter.add("policy", self.policy.network.last_macs)
        return decision.actions, decision

    def process_frame(self, t: int, frame: np.ndarray, run: ClipRun) -> TaskOutput:
        """Run every stage for frame t and append its record to `run`."""
        grid, cfg = self.grid, self.cfg
        frame = as_tensor(frame)
        if frame.shape != (3, grid.height, grid.width):
            raise StageError("input", f"frame {t} has shape {frame.shape}, expected (3, {grid.height}, {grid.width})")
        if t > 0 and run.prev_output is None:
            raise StageError("input", f"frame {t} processed before frame 0 of the clip")
        timings: dict = {}
        counter = MacCounter()

        actions, decision = self._decide(t, frame, run, timings, counter)

        with _stage("gather", timings, "time_gather_scatter"):
            composite = run.frame_state if run.frame_state is not None else np.zeros_like(frame)
            blocks = gather_blocks(frame[None], actions, grid.block_size, 0)
            run.frame_state = scatter_blocks(blocks, actions, composite[None], grid.block_size)[0]
        if actions.executed_count == grid.num_blocks:
            run.last_full_frame = t

        with _stage("task", timings, "time_task"):
            output = self.backend.execute(run.frame_state, frame, actions, run.canvas, grid, counter)

        ig: Optional[IGMap] = None
        if run.prev_output is not None:
            with _stage("info_gain", timings, "time_ig"):
                ig = self.backend.information_gain(output, run.prev_output, grid.height, grid.width)
                ig.reduce(grid)
                counter.add("ig", ig.ops)

        step = None
        if decision is not None:
            with _stage("update", timings, "time_update"):
                step = self.policy.learn(decision, ig.blocks)

        record = {
            "schema": JSONL_SCHEMA_VERSION,
            "clip": run.clip_index,
            "frame": t,
            "executed_fraction": _round(actions.executed_count / grid.num_blocks),
            "macs_task": counter.counts["task"],
            "macs_policy": counter.counts["policy"],
            "macs_ig": counter.counts["ig"],
            "bytes_moved": counter.bytes_moved,
            "ig_max": _round(ig.blocks.max()) if ig is not None else 0.0,
            "average_cost": _round(step.average_cost) if step else None,
            "loss": _round(step.loss) if step else None,
            "reward_mean": _round(step.rewards.total.mean()) if step else None,
            "updated": bool(step.updated) if step else False,
        }
        if cfg.report_timings:
            record.update({k: _round(timings.get(k, 0.0)) for k in TIMING_KEYS})
        run.records.append(record)
        run.outputs.append(output)
        run.actions.append(actions)
        run.ig_maps.append(ig)
        run.prev_output = output
        run.prev_actions = actions
        run.prev_frame = frame
        logger.debug("clip %d frame %d: executed %d/%d blocks", run.clip_index, t,
                     actions.executed_count, grid.num_blocks)
        return output

    def run_clip(self, clip: Clip, clip_index: int = 0,
                 observer: Optional[Callable] = None) -> ClipRun:
        """
        Process every frame of `clip`; with ground truth present, per-frame
        metrics and the moving-object block hit rate join the records.
        `observer(run, t)` is called after each frame and must not mutate `run`.
        """
        run = self.start_clip(clip_index)
        for t, frame in enumerate(clip.frames):
            self.process_frame(t, frame, run)
            if observer is not None:
                observer(run, t)
        if any(clip.ground_truth):
            with _stage("evaluate"):
                report = evaluate(run.outputs, clip, self.cfg.score_threshold, self.cfg.class_aware_matching)
            for t, (record, metrics) in enumerate(zip(run.records, report.per_frame)):
                record.update({k: _round(v) for k, v in metrics.items()})
                moving = moving_object_blocks(clip, t, self.grid)
                if t and moving.any():
                    hits = (run.actions[t].decisions.astype(bool) & moving).sum()
                    record["moving_hit_rate"] = _round(hits / moving.sum())
        return run


# ---------------------------------------------------------------------------
# Warmup and reporting
# ---------------------------------------------------------------------------

def warmup(clips: list[Clip], cfg: RunConfig, pipeline: Optional[SparseVideoPipeline] = None,
           quiet: bool = False) -> OnlinePolicy:
    """Online policy initialisation over `clips` (updates enabled, metrics ignored)."""
    if not clips:
        raise ValueError("warmup needs at least one clip")
    pipe = pipeline or SparseVideoPipeline(cfg.with_overrides(online=True))
    pipe.policy.online = True
    for i, clip in enumerate(clips):
        run = pipe.start_clip(i)
        for t, frame in enumerate(clip.frames):
            pipe.process_frame(t, frame, run)
        if not quiet:
            fraction = np.mean([r["executed_fraction"] for r in run.records[1:]]) if len(run.records) > 1 else 1.0
            print(f"[warmup] clip {i + 1}/{len(clips)} executed={fraction:.3f} updates={pipe.policy.updates}")
    pipe.policy.online = cfg.online
    return pipe.policy


def summarize(records: list[dict]) -> dict:
    """Means of every numeric per-frame field (frames without the field are skipped)."""
    summary: dict = {"schema": JSONL_SCHEMA_VERSION, "frames": len(records)}
    keys = sorted({k for r in records for k, v in r.items()
                   if isinstance(v, (int, float)) and not isinstance(v, bool)} - {"schema", "clip", "frame"})
    for key in keys:
        values = [r[key] for r in records if isinstance(r.get(key), (int, float))]
        if values:
            summary[f"mean_{key}"] = _round(np.mean(values))
    policy_frames = [r for r in records if r["frame"] > 0]
    if policy_frames:
        summary["mean_executed_fraction_sparse"] = _round(np.mean([r["executed_fraction"] for r in policy_frames]))
    return summary


def write_report(records: list[dict], path: str, summary_path: Optional[str] = None) -> dict:
    """Per-frame JSONL (sorted keys) plus a summary JSON; returns the summary."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    summary = summarize(records)
    summary_path = summary_path or os.path.splitext(path)[0] + "_summary.json"
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary
