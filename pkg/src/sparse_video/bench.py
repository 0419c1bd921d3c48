"""
src/sparse_video/bench.py — Cost/accuracy sweeps, baselines and the policy-input ablation.

Policy settings warm a fresh policy up on the warmup clips, then run the
held-out evaluation clips. Baselines (full execution, random blocks, frame
skipping, lower resolution) run the same evaluation clips without a policy.
Settings are independent, so they can run in worker processes; results do
not depend on the worker count.

Usage:
    from sparse_video.bench import sweep, tradeoff_correlation

    rows = sweep(cfg, taus=(0.1, 0.3, 0.5), eval_clips=4, jobs=2)
    rho = tradeoff_correlation(rows)
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.stats import spearmanr

from config import RunConfig
from sparse_video.block_runtime import MacCounter
from sparse_video.pipeline import ActionSource, SparseVideoPipeline, warmup
from sparse_video.policy import ABLATION_INPUTS
from sparse_video.synthetic import generate_clips
from sparse_video.tasks import evaluate, make_backend
from sparse_video.tensor_core import as_tensor

logger = logging.getLogger(__name__)

DEFAULT_TAUS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_SKIP_PERIODS = (2, 4)
DEFAULT_LOWRES_FACTORS = (2, 4)


def make_clips(cfg: RunConfig, count: int, held_out: bool) -> list:
    """Warmup clips use seed `cfg.seed`, evaluation clips the next seed."""
    return generate_clips(count, cfg.seed + (1 if held_out else 0), cfg.frame_height, cfg.frame_width,
                          cfg.clip_length, cfg.object_count, cfg.max_speed)


def run_setting(cfg: RunConfig, source: ActionSource, warmup_clips: list, eval_clips: list,
                label: str = "") -> dict:
    """One row: mean sparse-frame executed fraction, accuracy, task MACs and moving-object hit rate."""
    pipe = SparseVideoPipeline(cfg, source=source)
    if source.mode == "policy" and warmup_clips:
        warmup(warmup_clips, cfg, pipe, quiet=True)
    records = []
    for i, clip in enumerate(eval_clips):
        records.extend(pipe.run_clip(clip, clip_index=len(warmup_clips) + i).records)
    sparse = [r for r in records if r["frame"] > 0]
    accuracy_key = "miou" if cfg.task == "oracle-seg" else "f1"

    def mean(key, rows):
        values = [r[key] for r in rows if r.get(key) is not None]
        return float(np.mean(values)) if values else None

    return {
        "label": label or source.mode,
        "mode": source.mode,
        "tau": cfg.tau,
        "policy_inputs": list(cfg.policy_inputs),
        "executed_fraction": mean("executed_fraction", sparse),
        "accuracy": mean(accuracy_key, records),
        "macs_task": mean("macs_task", sparse),
        "moving_hit_rate": mean("moving_hit_rate", sparse),
    }


@dataclass(frozen=True)
class LowResolution:
    """Dense execution at 1/factor of the frame extents (lower-resolution baseline)."""

    factor: int


def run_lowres(cfg: RunConfig, factor: int, eval_clips: list, label: str = "") -> dict:
    """Row for the lower-resolution baseline; executed_fraction is the share of full-resolution pixels."""
    backend = make_backend(cfg)
    records = []
    for clip in eval_clips:
        outputs, macs = [], []
        for frame in clip.frames:
            counter = MacCounter()
            outputs.append(backend.execute_lowres(as_tensor(frame), factor, counter))
            macs.append(counter.counts["task"])
        report = evaluate(outputs, clip, cfg.score_threshold, cfg.class_aware_matching)
        records.extend({"frame": t, "macs_task": m, **metrics}
                       for t, (m, metrics) in enumerate(zip(macs, report.per_frame)))
    sparse = [r for r in records if r["frame"] > 0]
    accuracy_key = "miou" if cfg.task == "oracle-seg" else "f1"
    return {
        "label": label or f"lowres 1/{factor}",
        "mode": "lowres",
        "tau": cfg.tau,
        "policy_inputs": list(cfg.policy_inputs),
        "executed_fraction": 1.0 / (factor * factor),
        "accuracy": float(np.mean([r[accuracy_key] for r in records])) if records else None,
        "macs_task": float(np.mean([r["macs_task"] for r in sparse])) if sparse else None,
        "moving_hit_rate": None,
    }


def _worker(args: tuple) -> dict:
    cfg, source, warmup_count, eval_count, label = args
    held = make_clips(cfg, eval_count, held_out=True)
    if isinstance(source, LowResolution):
        return run_lowres(cfg, source.factor, held, label)
    warm = make_clips(cfg, warmup_count, held_out=False) if source.mode == "policy" else []
    return run_setting(cfg, source, warm, held, label)


def _run_all(jobs: list[tuple], workers: int) -> list[dict]:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_worker, jobs))
    rows = []
    for job in jobs:
        row = _worker(job)
        print(f"[bench] {row['label']:<24} executed={row['executed_fraction'] or 0:.3f} "
              f"accuracy={row['accuracy'] or 0:.3f}")
        rows.append(row)
    return rows


def sweep(cfg: RunConfig, taus: tuple = DEFAULT_TAUS, eval_clips: int = 4,
          warmup_clips: Optional[int] = None, jobs: int = 1, baselines: bool = True,
          skip_periods: tuple = DEFAULT_SKIP_PERIODS, lowres_factors: tuple = DEFAULT_LOWRES_FACTORS) -> list[dict]:
    """
    Policy rows for every tau; with baselines, full execution, random (rate tau),
    lower frame rate (every k-th frame) and lower resolution (1/f extents) rows.
    """
    warm = cfg.warmup_clips if warmup_clips is None else warmup_clips
    settings = [(replace(cfg, tau=tau), ActionSource("policy"), warm, eval_clips, f"policy tau={tau:.1f}")
                for tau in taus]
    if baselines:
        settings.append((cfg, ActionSource("all"), 0, eval_clips, "full"))
        settings += [(replace(cfg, tau=tau), ActionSource("random", tau), 0, eval_clips, f"random p={tau:.1f}")
                     for tau in taus]
        settings += [(cfg, ActionSource("skip", period=k), 0, eval_clips, f"skip 1/{k}") for k in skip_periods]
        settings += [(cfg, LowResolution(f), 0, eval_clips, f"lowres 1/{f}") for f in lowres_factors]
    return _run_all(settings, jobs)


def ablation(cfg: RunConfig, eval_clips: int = 4, warmup_clips: Optional[int] = None,
             jobs: int = 1) -> list[dict]:
    """
    Policy rows at cfg.tau for each documented input subset (online), one
    offline row and one resnet20-backbone row with cfg.policy_inputs.
    """
    warm = cfg.warmup_clips if warmup_clips is None else warmup_clips
    settings = [(replace(cfg, policy_inputs=inputs), ActionSource("policy"), warm, eval_clips,
                 "+".join(inputs)) for inputs in ABLATION_INPUTS]
    current = "+".join(cfg.policy_inputs)
    settings.append((replace(cfg, online=False), ActionSource("policy"), warm, eval_clips,
                     current + " (offline)"))
    settings.append((replace(cfg, online=True, policy_backbone="resnet20"), ActionSource("policy"), warm,
                     eval_clips, current + " (resnet20)"))
    return _run_all(settings, jobs)


def tradeoff_correlation(rows: list[dict], x: str = "executed_fraction", y: str = "accuracy") -> float:
    """Spearman correlation between two columns of the policy rows."""
    policy = [r for r in rows if r["mode"] == "policy" and r[x] is not None and r[y] is not None]
    if len(policy) < 3:
        raise ValueError("need at least three policy rows for a rank correlation")
    rho = spearmanr([r[x] for r in policy], [r[y] for r in policy]).correlation
    return float(rho) if np.isfinite(rho) else 0.0


def format_table(rows: list[dict]) -> str:
    header = f"{'setting':<40} {'executed':>9} {'accuracy':>9} {'macs_task':>11} {'moving_hit':>11}"
    lines = [header, "-" * len(header)]
    for r in rows:
        def fmt(v, spec):
            return format(v, spec) if v is not None else "-"
        lines.append(f"{r['label']:<40} {fmt(r['executed_fraction'], '9.3f')} {fmt(r['accuracy'], '9.3f')} "
                     f"{fmt(r['macs_task'], '11.0f')} {fmt(r['moving_hit_rate'], '11.3f')}")
    return "\n".join(lines)


def write_html(rows: list[dict], path: str, title: str = "Executed fraction vs accuracy") -> str:
    """Interactive trade-off chart, one trace per setting mode (needs plotly)."""
    try:
        import plotly.graph_objects as go
    except ImportError as e:
        raise RuntimeError("plotly is required for --html (pip install plotly)") from e
    fig = go.Figure()
    for mode in sorted({r["mode"] for r in rows}):
        subset = sorted((r for r in rows if r["mode"] == mode), key=lambda r: r["executed_fraction"] or 0)
        fig.add_trace(go.Scatter(
            x=[r["executed_fraction"] for r in subset],
            y=[r["accuracy"] for r in subset],
            mode="lines+markers" if len(subset) > 1 else "markers",
            name=mode,
            text=[r["label"] for r in subset],
        ))
    fig.update_layout(title=title, xaxis_title="mean executed fraction", yaxis_title="accuracy")
    fig.write_html(path)
    return path
