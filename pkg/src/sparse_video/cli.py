"""
src/sparse_video/cli.py — Command-line front end.

Commands:
    gen        write synthetic clips (PPM frames, index, ground truth)
    run        warm up a policy, run clips, write JSONL + summary (+ --viz images)
    eval       score a run's predictions against clip ground truth
    bench      sweep tau, add full/random baselines (or --ablation), report the trade-off
    selftest   fast invariant checks

Usage:
    python run_sparse_video.py gen --clips 4 --out runs/clips
    python run_sparse_video.py run --task oracle-det --tau 0.3 --clips-dir runs/clips --out runs/r1 --viz
    python run_sparse_video.py eval --run runs/r1 --clips-dir runs/clips
    python run_sparse_video.py bench --task oracle-det --clips 4 --jobs 4 --html runs/bench.html
    python -m sparse_video selftest

Every flag also has a SPARSEVID_* environment default (see src/config.py);
precedence is defaults < environment < --config file < flags.
"""

import argparse
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from config import DEFAULT_OUT_DIR, POLICY_BACKBONES, TASKS, load_run_config
from sparse_video.bench import (
    DEFAULT_TAUS,
    ablation,
    format_table,
    make_clips,
    sweep,
    tradeoff_correlation,
    write_html,
)
from sparse_video.image_io import outline_blocks, read_pgm, write_pgm, write_ppm
from sparse_video.info_gain import Detection
from sparse_video.pipeline import SparseVideoPipeline, StageError, warmup, write_report
from sparse_video.selftest import run_selftest
from sparse_video.synthetic import generate_clips, list_clip_dirs, load_clip, save_clip
from sparse_video.tasks import TaskOutput, ToyDetector, evaluate, make_backend

logger = logging.getLogger(__name__)

PREDICTIONS_FILE = "predictions.jsonl"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration (key: value)")
    p.add_argument("--tau", type=float, help="target executed fraction")
    p.add_argument("--seed", type=int)
    p.add_argument("--block-size", type=int, dest="block_size")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--policy-backbone", choices=POLICY_BACKBONES, dest="policy_backbone")
    p.add_argument("--frames", type=int, dest="clip_length", help="frames per generated clip")
    p.add_argument("--warmup-clips", type=int, dest="warmup_clips")
    p.add_argument("--clips", type=int, default=2, help="number of clips to generate / evaluate")
    p.add_argument("--out", default=DEFAULT_OUT_DIR, help="output directory")
    p.add_argument("--timings", action="store_true", default=None, dest="report_timings",
                   help="include wall-clock stage timings in the JSONL (not byte-reproducible)")
    p.add_argument("--verbose", action="store_true")


def _config(args: argparse.Namespace):
    return load_run_config(
        args.config,
        tau=args.tau, seed=args.seed, block_size=args.block_size, task=args.task,
        clip_length=args.clip_length, warmup_clips=args.warmup_clips, report_timings=args.report_timings,
        policy_backbone=args.policy_backbone,
    )


def _clips(args, cfg, held_out: bool = True) -> list:
    if getattr(args, "clips_dir", None):
        return [load_clip(d) for d in list_clip_dirs(args.clips_dir)]
    return make_clips(cfg, args.clips, held_out=held_out)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args)
    clips = generate_clips(args.clips, cfg.seed, cfg.frame_height, cfg.frame_width,
                           cfg.clip_length, cfg.object_count, cfg.max_speed)
    for i, clip in enumerate(clips):
        clip_dir = os.path.join(args.out, f"clip_{i:03d}")
        save_clip(clip, clip_dir)
        print(f"[gen] {clip_dir}: {len(clip)} frames, {sum(len(g) for g in clip.ground_truth)} boxes")
    return 0


def _prediction_record(clip_index: int, t: int, output: TaskOutput, label_dir: str) -> dict:
    record = {"clip": clip_index, "frame": t}
    if output.is_detection:
        record["detections"] = [d.as_record() for d in output.detections]
    else:
        name = f"labels_{clip_index:03d}_{t:04d}.pgm"
        write_pgm(os.path.join(label_dir, name), output.probs.argmax(axis=0) / 255.0)
        record["labels"] = name
    return record


def _viz_observer(out_dir: str, pipe: SparseVideoPipeline, dump_canvases: bool):
    """Writes the composite with executed blocks outlined and the gain heatmap; reads run state only."""
    def observe(run, t):
        clip_dir = os.path.join(out_dir, f"clip_{run.clip_index:03d}")
        decisions = run.actions[t].decisions
        write_ppm(os.path.join(clip_dir, f"frame_{t:04d}_state.ppm"),
                  outline_blocks(run.frame_state, decisions, pipe.grid.block_size))
        if run.ig_maps[t] is not None:
            run.ig_maps[t].to_pgm(os.path.join(clip_dir, f"frame_{t:04d}_ig.pgm"))
        if dump_canvases and run.canvas is not None:
            run.canvas.export(os.path.join(clip_dir, "canvases"), prefix=f"frame_{t:04d}_")
    return observe


def cmd_run(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    detector = ToyDetector.from_dir(args.detector_dir) if args.detector_dir and cfg.task == "toy-det" else None
    pipe = SparseVideoPipeline(cfg, backend=make_backend(cfg, detector))
    print(f"[run] task={cfg.task} tau={cfg.tau} grid={pipe.grid.gh}x{pipe.grid.gw} "
          f"dense task MACs/frame={pipe.dense_macs}")

    if args.policy_dir:
        pipe.policy.load(args.policy_dir)
        print(f"[run] policy loaded from {args.policy_dir}")
    elif cfg.warmup_clips:
        print(f"[run] Step 1/2: warmup on {cfg.warmup_clips} clips")
        warmup(make_clips(cfg, cfg.warmup_clips, held_out=False), cfg, pipe)
    if args.save_policy:
        pipe.policy.save(args.save_policy)

    print("[run] Step 2/2: evaluation clips")
    observer = _viz_observer(os.path.join(args.out, "viz"), pipe, args.dump_canvases) \
        if args.viz or args.dump_canvases else None
    records, predictions = [], []
    label_dir = os.path.join(args.out, "labels")
    for i, clip in enumerate(_clips(args, cfg)):
        run = pipe.run_clip(clip, clip_index=i, observer=observer)
        records.extend(run.records)
        predictions.extend(_prediction_record(i, t, out, label_dir) for t, out in enumerate(run.outputs))

    summary = write_report(records, os.path.join(args.out, "run.jsonl"))
    with open(os.path.join(args.out, PREDICTIONS_FILE), "w") as f:
        for rec in predictions:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"[run] frames={summary['frames']} mean executed (sparse frames)="
          f"{summary.get('mean_executed_fraction_sparse', 1.0):.3f} → {args.out}")
    return 0


def _load_predictions(run_dir: str, num_classes: int) -> dict:
    path = os.path.join(run_dir, PREDICTIONS_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Predictions not found: {path} (produce them with `run`)")
    streams: dict = {}
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if "detections" in rec:
                out = TaskOutput(detections=[Detection(tuple(d["box"]), d["score"], d["class"])
                                             for d in rec["detections"]])
            else:
                labels = np.rint(read_pgm(os.path.join(run_dir, "labels", rec["labels"])) * 255).astype(int)
                out = TaskOutput(probs=np.eye(num_classes)[labels].transpose(2, 0, 1))
            streams.setdefault(rec["clip"], []).append(out)
    return streams


def cmd_eval(args) -> int:
    cfg = _config(args)
    streams = _load_predictions(args.run, cfg.num_classes)
    clips = _clips(args, cfg)
    if len(clips) != len(streams):
        raise ValueError(f"{len(streams)} predicted clips but {len(clips)} ground-truth clips")
    means = []
    for i, clip in enumerate(clips):
        report = evaluate(streams[i], clip, cfg.score_threshold, cfg.class_aware_matching)
        means.append(report.mean)
        print(f"[eval] clip {i}: " + " ".join(f"{k}={v:.4f}" for k, v in sorted(report.mean.items())))
    overall = {k: float(np.mean([m[k] for m in means])) for k in means[0]}
    print("[eval] mean: " + " ".join(f"{k}={v:.4f}" for k, v in sorted(overall.items())))
    with open(os.path.join(args.run, "eval.json"), "w") as f:
        json.dump({"clips": means, "mean": overall}, f, indent=2, sort_keys=True)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    if args.ablation:
        rows = ablation(cfg, eval_clips=args.clips, jobs=args.jobs)
    else:
        taus = tuple(float(t) for t in args.taus.split(",")) if args.taus else DEFAULT_TAUS
        rows = sweep(cfg, taus, eval_clips=args.clips, jobs=args.jobs)
    print(format_table(rows))
    with open(os.path.join(args.out, "bench.jsonl"), "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    if not args.ablation:
        print(f"[bench] spearman(tau, executed)={tradeoff_correlation(rows, 'tau', 'executed_fraction'):.3f} "
              f"spearman(executed, accuracy)={tradeoff_correlation(rows):.3f}")
    if args.html:
        print(f"[bench] chart → {write_html(rows, args.html)}")
    return 0


def cmd_selftest(args) -> int:
    return 2 if run_selftest() else 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-video", description="Block-sparse video inference runtime")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic clips with ground truth")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run the pipeline on clips")
    _add_common(p)
    p.add_argument("--clips-dir", help="directory of clips written by `gen` (default: generate)")
    p.add_argument("--viz", action="store_true", help="write composite/gain images per frame")
    p.add_argument("--dump-canvases", action="store_true", help="write feature canvases as BCT1 per frame")
    p.add_argument("--policy-dir", help="load policy parameters instead of warming up")
    p.add_argument("--save-policy", help="write policy parameters after warmup")
    p.add_argument("--detector-dir", help="toy detector weights (parameter container)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score predictions of a run against ground truth")
    _add_common(p)
    p.add_argument("--run", required=True, help="output directory of `run`")
    p.add_argument("--clips-dir", help="clips the run was made on (default: regenerate)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="tau sweep with baselines, or the policy-input ablation")
    _add_common(p)
    p.add_argument("--taus", help="comma-separated tau values (default 0.1..0.9)")
    p.add_argument("--ablation", action="store_true", help="compare policy input subsets at --tau")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--html", help="write an interactive plotly chart to this path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="fast invariant checks")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as e:
        print(f"[{args.command}][FAIL] stage={e.stage}: {e}", file=sys.stderr)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"[{args.command}][FAIL] stage=setup: {e}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
