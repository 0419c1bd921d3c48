"""
tests/test_pipeline.py — Closed-loop frame processing, action sources, reports and warmup.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from sparse_video.block_runtime import BlockGrid
from sparse_video.pipeline import (
    ActionSource,
    SparseVideoPipeline,
    StageError,
    moving_object_blocks,
    summarize,
    warmup,
    write_report,
)

RECORD_KEYS = {
    "schema", "clip", "frame", "executed_fraction", "macs_task", "macs_policy", "macs_ig",
    "bytes_moved", "ig_max", "average_cost", "loss", "reward_mean", "updated",
}


@pytest.fixture
def toy_cfg(small_cfg):
    return replace(small_cfg, task="toy-det")


# ---------------------------------------------------------------------------
# Section 1 — frame loop
# ---------------------------------------------------------------------------

class TestFrameLoop:

    def test_frame_zero_is_dense_without_loss(self, small_cfg, moving_clip):
        run = SparseVideoPipeline(small_cfg).run_clip(moving_clip)
        first = run.records[0]
        assert first["executed_fraction"] == 1.0
        assert first["loss"] is None and first["average_cost"] is None and first["updated"] is False
        assert first["macs_policy"] == 0 and first["ig_max"] == 0.0
        assert run.ig_maps[0] is None
        assert all(r["loss"] is not None for r in run.records[1:])
        assert all(r["macs_policy"] > 0 for r in run.records[1:])

    def test_record_keys(self, small_cfg, moving_clip):
        run = SparseVideoPipeline(small_cfg).run_clip(moving_clip)
        for record in run.records:
            assert RECORD_KEYS | {"precision", "recall", "f1"} <= set(record)
            assert not any(k.startswith("time_") for k in record)

    def test_timings_are_opt_in(self, small_cfg, moving_clip):
        run = SparseVideoPipeline(replace(small_cfg, report_timings=True)).run_clip(moving_clip)
        assert {"time_policy", "time_task", "time_ig"} <= set(run.records[1])
        assert all(run.records[1][k] >= 0.0 for k in ("time_policy", "time_task", "time_ig"))

    def test_static_clip_has_no_gain(self, small_cfg, static_clip):
        run = SparseVideoPipeline(small_cfg).run_clip(static_clip)
        assert all(out == run.outputs[0] for out in run.outputs)
        assert all(r["ig_max"] == 0.0 for r in run.records)
        assert all(r["f1"] == 1.0 for r in run.records)

    def test_moving_clip_produces_gain(self, small_cfg, moving_clip):
        run = SparseVideoPipeline(small_cfg, source=ActionSource("all")).run_clip(moving_clip)
        assert max(r["ig_max"] for r in run.records) > 0.0

    def test_copying_every_block_freezes_the_frame_state(self, small_cfg, moving_clip):
        pipe = SparseVideoPipeline(small_cfg, source=ActionSource("forced", 0.0))
        states = []
        run = pipe.run_clip(moving_clip, observer=lambda r, t: states.append(r.frame_state.copy()))
        assert all(np.array_equal(s, moving_clip.frames[0]) for s in states)
        assert all(r["ig_max"] == 0.0 for r in run.records)
        assert all(r["executed_fraction"] == 0.0 for r in run.records[1:])

    def test_deterministic_jsonl(self, small_cfg, moving_clip, tmp_path):
        paths = []
        for name in ("a", "b"):
            run = SparseVideoPipeline(small_cfg).run_clip(moving_clip, clip_index=3)
            paths.append(tmp_path / f"{name}.jsonl")
            write_report(run.records, str(paths[-1]))
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert json.loads(paths[0].read_text().splitlines()[0])["clip"] == 3

    def test_moving_hit_rate_recorded(self, small_cfg, moving_clip):
        run = SparseVideoPipeline(small_cfg, source=ActionSource("all")).run_clip(moving_clip)
        rates = [r["moving_hit_rate"] for r in run.records if "moving_hit_rate" in r]
        assert rates and all(rate == 1.0 for rate in rates)

    def test_offline_policy_never_updates(self, small_cfg, moving_clip):
        pipe = SparseVideoPipeline(replace(small_cfg, online=False))
        run = pipe.run_clip(moving_clip)
        assert pipe.policy.updates == 0
        assert not any(r["updated"] for r in run.records)


# ---------------------------------------------------------------------------
# Section 2 — toy detector in the loop
# ---------------------------------------------------------------------------

class TestToyDetectorLoop:

    def test_all_blocks_matches_dense_every_frame(self, toy_cfg, moving_clip):
        pipe = SparseVideoPipeline(toy_cfg, source=ActionSource("all"))
        network = pipe.backend.detector.network
        worst = []

        def check(run, t):
            dense = network.run_dense(moving_clip.frames[t][None])
            worst.append(max(float(np.abs(run.canvas[k] - v).max()) for k, v in dense.items()))

        pipe.run_clip(moving_clip, observer=check)
        assert len(worst) == len(moving_clip) and max(worst) <= 1e-5

    @pytest.mark.parametrize("fraction", [0.0, 0.25, 0.5, 0.75, 1.0])
    def test_task_macs_follow_forced_fraction(self, toy_cfg, moving_clip, fraction):
        pipe = SparseVideoPipeline(toy_cfg, source=ActionSource("forced", fraction))
        run = pipe.run_clip(moving_clip)
        blocks = pipe.grid.num_blocks
        executed = int(np.floor(fraction * blocks))
        assert run.records[0]["macs_task"] == pipe.dense_macs
        for record in run.records[1:]:
            assert record["macs_task"] * blocks == executed * pipe.dense_macs
            assert record["macs_policy"] == 0

    def test_oracle_backends_report_no_task_macs(self, small_cfg, moving_clip):
        run = SparseVideoPipeline(small_cfg).run_clip(moving_clip)
        assert all(r["macs_task"] == 0 for r in run.records)


# ---------------------------------------------------------------------------
# Section 3 — errors
# ---------------------------------------------------------------------------

def test_wrong_frame_shape(small_cfg):
    pipe = SparseVideoPipeline(small_cfg)
    with pytest.raises(StageError) as exc:
        pipe.process_frame(0, np.zeros((3, 16, 64), np.float32), pipe.start_clip())
    assert exc.value.stage == "input"


def test_frame_before_first(small_cfg, moving_clip):
    pipe = SparseVideoPipeline(small_cfg)
    with pytest.raises(StageError, match="before frame 0"):
        pipe.process_frame(1, moving_clip.frames[1], pipe.start_clip())


def test_stage_failure_names_the_stage(small_cfg, moving_clip, mocker):
    pipe = SparseVideoPipeline(small_cfg)
    mocker.patch.object(pipe.backend, "execute", side_effect=RuntimeError("boom"))
    with pytest.raises(StageError, match="RuntimeError: boom") as exc:
        pipe.run_clip(moving_clip)
    assert exc.value.stage == "task"
    assert isinstance(exc.value.__cause__, RuntimeError)


def test_action_source_validation():
    with pytest.raises(ValueError):
        ActionSource("sometimes")
    with pytest.raises(ValueError):
        ActionSource("random", 1.5)


def test_skip_source_validation():
    with pytest.raises(ValueError, match="period"):
        ActionSource("skip", period=0)


@pytest.mark.parametrize("period", [2, 3])
def test_skip_source_runs_every_kth_frame(small_cfg, moving_clip, period):
    run = SparseVideoPipeline(small_cfg, source=ActionSource("skip", period=period)).run_clip(moving_clip)
    assert [r["executed_fraction"] for r in run.records] == [
        1.0 if t % period == 0 else 0.0 for t in range(len(moving_clip.frames))
    ]
    for t in range(1, len(moving_clip.frames)):
        if t % period:
            assert run.outputs[t] == run.outputs[t - 1]
            assert run.records[t]["macs_task"] == 0


def test_random_source_is_seeded(small_cfg, moving_clip):
    runs = [SparseVideoPipeline(small_cfg, source=ActionSource("random", 0.5)).run_clip(moving_clip)
            for _ in range(2)]
    assert all(np.array_equal(a.decisions, b.decisions) for a, b in zip(runs[0].actions, runs[1].actions))


# ---------------------------------------------------------------------------
# Section 4 — helpers, warmup and reports
# ---------------------------------------------------------------------------

def test_moving_object_blocks(static_clip, moving_clip):
    grid = BlockGrid(32, 64, 16)
    assert moving_object_blocks(static_clip, 0, grid).sum() > 0
    assert not moving_object_blocks(static_clip, 3, grid).any()
    rec = moving_clip.ground_truth[0][0]
    x1, y1 = rec["box"][:2]
    assert moving_object_blocks(moving_clip, 0, grid)[y1 // 16, x1 // 16]


def test_warmup_updates_and_restores_mode(small_cfg, moving_clip, capsys):
    cfg = replace(small_cfg, online=False)
    policy = warmup([moving_clip], cfg)
    assert policy.updates == 1
    assert policy.online is False
    assert "[warmup] clip 1/1" in capsys.readouterr().out


def test_warmup_needs_clips(small_cfg):
    with pytest.raises(ValueError):
        warmup([], small_cfg)


def test_warmup_twice_is_bit_identical(small_cfg, moving_clip, static_clip):
    first = warmup([moving_clip, static_clip], small_cfg, quiet=True)
    second = warmup([moving_clip, static_clip], small_cfg, quiet=True)
    assert first.updates == second.updates > 0
    assert first.network.params.keys() == second.network.params.keys()
    for name, value in first.network.params.items():
        assert np.array_equal(value, second.network.params[name]), name


def test_summarize():
    records = [
        {"schema": 1, "clip": 0, "frame": 0, "executed_fraction": 1.0, "loss": None, "updated": False},
        {"schema": 1, "clip": 0, "frame": 1, "executed_fraction": 0.5, "loss": 0.2, "updated": True},
        {"schema": 1, "clip": 0, "frame": 2, "executed_fraction": 0.25, "loss": 0.4, "updated": False},
    ]
    summary = summarize(records)
    assert summary["frames"] == 3
    assert summary["mean_executed_fraction"] == pytest.approx(0.583333333)
    assert summary["mean_executed_fraction_sparse"] == pytest.approx(0.375)
    assert summary["mean_loss"] == pytest.approx(0.3)
    assert "mean_updated" not in summary and "mean_frame" not in summary


def test_write_report(tmp_path):
    records = [{"schema": 1, "clip": 0, "frame": 0, "executed_fraction": 1.0}]
    summary = write_report(records, str(tmp_path / "out" / "run.jsonl"))
    assert (tmp_path / "out" / "run.jsonl").read_text() == json.dumps(records[0], sort_keys=True) + "\n"
    assert json.loads((tmp_path / "out" / "run_summary.json").read_text()) == summary
