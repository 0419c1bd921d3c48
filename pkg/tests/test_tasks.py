"""
tests/test_tasks.py — Oracle backends, the toy detector over the sparse
runtime, decoding/NMS and detection / segmentation metrics.
"""

from dataclasses import replace

import numpy as np
import pytest

from sparse_video.block_runtime import ActionGrid, BlockGrid, MacCounter
from sparse_video.info_gain import Detection
from sparse_video.synthetic import CLASS_COLORS, quantize
from sparse_video.tasks import (
    DetectionMetrics,
    TaskOutput,
    ToyDetector,
    color_labels,
    decode_heatmap,
    evaluate,
    fit_heat_head,
    make_backend,
    match_detections,
    mean_iou,
    nms,
    oracle_detector,
    oracle_segmenter,
    scale_detections,
    truth_detections,
)


def _canvas_frame(h=32, w=64):
    return np.full((3, h, w), 0.5, np.float32)


def _paint(frame, box, class_id):
    x1, y1, x2, y2 = box
    frame[:, y1:y2, x1:x2] = quantize(CLASS_COLORS[class_id])[:, None, None]
    return frame


# ---------------------------------------------------------------------------
# Section 1 — oracles
# ---------------------------------------------------------------------------

class TestOracles:

    def test_color_labels(self):
        frame = _paint(_canvas_frame(), (2, 2, 6, 6), 2)
        labels = color_labels(frame)
        assert np.all(labels[2:6, 2:6] == 2)
        assert labels.sum() == 2 * 16

    def test_detector_recovers_ground_truth_boxes(self, static_clip):
        dets = oracle_detector(static_clip.frames[0])
        truth = sorted((tuple(r["box"]), r["class"]) for r in static_clip.ground_truth[0])
        assert sorted((d.box, d.class_id) for d in dets) == truth
        assert all(d.score == 1.0 for d in dets)

    def test_detector_score_is_fill_ratio(self):
        frame = _paint(_canvas_frame(), (0, 0, 8, 2), 1)
        _paint(frame, (0, 0, 2, 8), 1)
        (det,) = oracle_detector(frame)
        assert det.box == (0, 0, 8, 8)
        assert det.score == pytest.approx(max(28 / 64, 0.5))

    def test_detector_masks(self):
        frame = _paint(_canvas_frame(), (4, 4, 8, 10), 3)
        (det,) = oracle_detector(frame, with_masks=True)
        assert det.mask.shape == (32, 64) and det.mask.sum() == 24
        assert oracle_detector(frame)[0].mask is None

    def test_segmenter_distribution(self):
        frame = _paint(_canvas_frame(), (0, 0, 4, 4), 1)
        probs = oracle_segmenter(frame, num_classes=4)
        assert probs.shape == (4, 32, 64)
        assert np.allclose(probs.sum(axis=0), 1.0)
        assert probs[1, 0, 0] == 0.9 and probs[0, 20, 20] == 0.9

    def test_segmenter_folds_unknown_classes_into_background(self):
        frame = _paint(_canvas_frame(), (0, 0, 4, 4), 3)
        probs = oracle_segmenter(frame, num_classes=2)
        assert probs[0, 0, 0] == 0.9


# ---------------------------------------------------------------------------
# Section 2 — decoding and NMS
# ---------------------------------------------------------------------------

def test_nms_keeps_best_and_suppresses_overlaps():
    a = Detection((0, 0, 10, 10), 0.9)
    b = Detection((1, 0, 11, 10), 0.8)
    c = Detection((20, 0, 30, 10), 0.7)
    assert nms([b, a, c], 0.5) == [a, c]


def test_nms_keeps_boxes_at_threshold():
    a = Detection((0, 0, 4, 4), 0.9)
    b = Detection((0, 0, 4, 2), 0.8)
    assert nms([a, b], 0.5) == [a, b]


def test_decode_single_peak():
    heat = np.zeros((8, 8))
    heat[3, 4] = 0.9
    size = np.zeros((2, 8, 8))
    (det,) = decode_heatmap(heat, size, 16, 16)
    assert det.box == (5, 3, 13, 11)
    assert det.score == pytest.approx(0.9)


def test_decode_threshold_is_strict():
    heat = np.full((4, 4), 0.5)
    assert decode_heatmap(heat, np.zeros((2, 4, 4)), 8, 8) == []


# ---------------------------------------------------------------------------
# Section 3 — toy detector over the sparse runtime
# ---------------------------------------------------------------------------

class TestToyDetector:

    def test_blank_input_decodes_to_nothing(self):
        dets, acts = ToyDetector.from_seed(0).forward_dense(np.zeros((3, 32, 64), np.float32))
        assert dets == []
        assert acts["heat"].shape == (1, 1, 16, 32)

    @pytest.mark.parametrize("seed", range(20))
    def test_full_execution_equivalence(self, seed, small_grid):
        detector = ToyDetector.from_seed(seed, score_threshold=0.3)
        frame = np.random.default_rng(seed).random((3, 32, 64)).astype(np.float32)
        _, dense = detector.forward_dense(frame)
        canvas = detector.network.new_canvas(small_grid)
        detector.forward_sparse(frame, ActionGrid.ones(small_grid), canvas, small_grid)
        for name, act in dense.items():
            assert np.abs(canvas[name] - act).max() <= 1e-5, name

    def test_copy_purity(self, moving_clip, small_grid):
        detector = ToyDetector.from_seed(4, score_threshold=0.3)
        canvas = detector.network.new_canvas(small_grid)
        first = detector.forward_sparse(moving_clip.frames[0], ActionGrid.ones(small_grid), canvas, small_grid)
        before = canvas.snapshot()
        again = detector.forward_sparse(moving_clip.frames[1], ActionGrid.zeros(small_grid, 1), canvas, small_grid)
        assert again == first
        for name in before.layers:
            assert np.array_equal(before[name], canvas[name]), name

    @pytest.mark.parametrize("fraction", [0.0, 0.25, 0.5, 0.75, 1.0])
    def test_task_macs_scale_with_executed_fraction(self, small_cfg, fraction):
        cfg = replace(small_cfg, task="toy-det", frame_height=64, frame_width=128)
        backend = make_backend(cfg)
        grid = BlockGrid(64, 128, 16, backend.depth)
        n = int(fraction * grid.num_blocks)
        decisions = np.zeros(grid.num_blocks, np.uint8)
        decisions[:n] = 1
        counter = MacCounter()
        frame = np.random.default_rng(0).random((3, 64, 128)).astype(np.float32)
        backend.execute(frame, frame, ActionGrid(decisions.reshape(grid.gh, grid.gw)),
                        backend.new_canvas(grid), grid, counter)
        assert counter.counts["task"] * grid.num_blocks == n * backend.dense_macs(grid)

    def test_weights_round_trip_through_container(self, tmp_path):
        detector = ToyDetector.from_seed(3)
        detector.save(str(tmp_path))
        loaded = ToyDetector.from_dir(str(tmp_path))
        assert all(np.array_equal(detector.params[k], loaded.params[k]) for k in detector.params)

    def test_fit_heat_head_returns_new_detector(self, static_clip):
        clip = replace(static_clip, frames=static_clip.frames[:2], ground_truth=static_clip.ground_truth[:2])
        detector = ToyDetector.from_seed(0)
        fitted = fit_heat_head(detector, [clip], steps=5, lr=0.5)
        assert fitted is not detector
        assert not np.array_equal(fitted.params["heat.weight"], detector.params["heat.weight"])
        assert np.array_equal(fitted.params["c1.weight"], detector.params["c1.weight"])
        assert np.array_equal(detector.params["heat.weight"], ToyDetector.from_seed(0).params["heat.weight"])

    def test_fit_heat_head_needs_frames(self):
        with pytest.raises(ValueError):
            fit_heat_head(ToyDetector.from_seed(0), [])


# ---------------------------------------------------------------------------
# Section 4 — backends
# ---------------------------------------------------------------------------

class TestBackends:

    @pytest.mark.parametrize("task,channels", [("toy-det", 1), ("oracle-det", 3), ("oracle-inst", 3),
                                               ("oracle-seg", 4)])
    def test_output_channels(self, small_cfg, task, channels):
        backend = make_backend(replace(small_cfg, task=task, num_classes=4))
        assert backend.output_channels == channels
        assert backend.is_detection == (task != "oracle-seg")

    def test_oracles_cost_no_macs(self, small_cfg, static_clip, small_grid):
        backend = make_backend(small_cfg)
        counter = MacCounter()
        out = backend.execute(static_clip.frames[0], static_clip.frames[0], ActionGrid.ones(small_grid),
                              None, small_grid, counter)
        assert counter.total == 0 and backend.dense_macs(small_grid) == 0
        assert len(out.detections) == 2

    def test_render_detection_channels(self, small_cfg):
        backend = make_backend(replace(small_cfg, num_classes=4))
        out = TaskOutput(detections=[Detection((0, 0, 4, 4), 0.7, 1), Detection((2, 2, 6, 6), 0.9, 3)])
        channels = backend.render(out, 32, 64)
        assert channels.shape == (3, 32, 64)
        assert channels[0, 0, 0] == pytest.approx(0.7) and channels[2, 3, 3] == pytest.approx(0.9)
        assert channels[1].sum() == 0

    def test_render_segmentation_is_the_distribution(self, small_cfg, static_clip):
        backend = make_backend(replace(small_cfg, task="oracle-seg", num_classes=4))
        probs = oracle_segmenter(static_clip.frames[0], 4)
        assert np.allclose(backend.render(TaskOutput(probs=probs), 32, 64), probs)

    def test_information_gain_dispatch(self, small_cfg, static_clip, moving_clip, small_grid):
        for task in ("oracle-det", "oracle-inst", "oracle-seg"):
            backend = make_backend(replace(small_cfg, task=task))
            a = backend.execute(static_clip.frames[0], None, ActionGrid.ones(small_grid), None, small_grid)
            b = backend.execute(moving_clip.frames[0], None, ActionGrid.ones(small_grid), None, small_grid)
            assert not backend.information_gain(a, a, 32, 64).pixels.any()
            assert backend.information_gain(b, a, 32, 64).pixels.max() > 0

    def test_output_record(self):
        assert TaskOutput(detections=[Detection((0, 0, 1, 1), 0.5, 2)]).as_record() == {
            "detections": [{"box": [0, 0, 1, 1], "score": 0.5, "class": 2}]}
        probs = np.zeros((3, 1, 2))
        probs[1] = 1.0
        assert TaskOutput(probs=probs).as_record() == {"labels": [0, 2, 0]}

    @pytest.mark.parametrize("factor", [2, 4])
    def test_lowres_recovers_block_aligned_objects(self, small_cfg, factor):
        frame = _paint(_canvas_frame(), (8, 8, 24, 24), 1)
        out = make_backend(replace(small_cfg, task="oracle-inst")).execute_lowres(frame, factor)
        assert [(d.box, d.class_id) for d in out.detections] == [((8, 8, 24, 24), 1)]
        mask = out.detections[0].mask
        assert mask.shape == (32, 64) and mask.sum() == 16 * 16

    def test_lowres_segmentation_keeps_frame_extent(self, small_cfg, static_clip):
        backend = make_backend(replace(small_cfg, task="oracle-seg", num_classes=4))
        probs = backend.execute_lowres(static_clip.frames[0], 2).probs
        assert probs.shape == (4, 32, 64)
        assert np.allclose(probs.sum(axis=0), 1.0)

    def test_lowres_toy_detector_pays_for_the_small_frame(self, small_cfg, moving_clip, small_grid):
        backend = make_backend(replace(small_cfg, task="toy-det"))
        counter = MacCounter()
        backend.execute_lowres(moving_clip.frames[0], 2, counter)
        small = BlockGrid(16, 32, 16, backend.depth)
        assert counter.counts["task"] == backend.detector.network.dense_macs(small)
        assert counter.counts["task"] * 4 == backend.detector.network.dense_macs(small_grid)

    def test_lowres_factor_must_divide_frame(self, small_cfg):
        with pytest.raises(ValueError, match="must divide"):
            make_backend(small_cfg).execute_lowres(_canvas_frame(), 3)

    def test_scale_detections(self):
        mask = np.zeros((4, 4), bool)
        mask[1:3, 1:3] = True
        (det,) = scale_detections([Detection((1, 1, 3, 4), 0.8, 2, mask)], 2, 8, 8)
        assert det.box == (2, 2, 6, 8)
        assert (det.score, det.class_id) == (0.8, 2)
        assert det.mask.shape == (8, 8) and det.mask.sum() == 16 and det.mask[2:6, 2:6].all()


# ---------------------------------------------------------------------------
# Section 5 — metrics
# ---------------------------------------------------------------------------

class TestMetrics:

    def test_perfect_match(self):
        truth = [Detection((0, 0, 4, 4), 1.0, 1), Detection((10, 10, 14, 14), 1.0, 2)]
        m = match_detections(truth, truth)
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)

    def test_misses_and_false_alarms(self):
        truth = [Detection((0, 0, 4, 4), 1.0), Detection((10, 10, 14, 14), 1.0)]
        pred = [Detection((0, 0, 4, 4), 0.9), Detection((20, 20, 24, 24), 0.8)]
        m = match_detections(pred, truth)
        assert (m.true_positives, m.false_positives, m.false_negatives) == (1, 1, 1)
        assert m.f1 == pytest.approx(0.5)

    def test_score_threshold_filters_predictions(self):
        truth = [Detection((0, 0, 4, 4), 1.0)]
        m = match_detections([Detection((0, 0, 4, 4), 0.4)], truth, score_threshold=0.5)
        assert m.true_positives == 0 and m.false_positives == 0 and m.recall == 0.0

    def test_each_truth_matches_once(self):
        truth = [Detection((0, 0, 4, 4), 1.0)]
        pred = [Detection((0, 0, 4, 4), 0.9), Detection((0, 0, 4, 4), 0.8)]
        m = match_detections(pred, truth)
        assert (m.true_positives, m.false_positives) == (1, 1)

    def test_class_aware(self):
        truth = [Detection((0, 0, 4, 4), 1.0, 1)]
        pred = [Detection((0, 0, 4, 4), 0.9, 2)]
        assert match_detections(pred, truth).true_positives == 1
        assert match_detections(pred, truth, class_aware=True).true_positives == 0

    def test_empty_conventions(self):
        m = DetectionMetrics()
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
        assert DetectionMetrics(0, 0, 2).f1 == 0.0

    def test_mean_iou(self):
        labels = np.array([[0, 1], [1, 1]])
        assert mean_iou(np.eye(2)[labels].transpose(2, 0, 1), labels) == 1.0
        probs = np.eye(2)[np.ones((2, 2), int)].transpose(2, 0, 1)
        assert mean_iou(probs, labels) == pytest.approx((0.0 + 0.75) / 2)

    def test_evaluate_oracle_on_static_clip(self, static_clip):
        preds = [TaskOutput(detections=oracle_detector(f)) for f in static_clip.frames]
        report = evaluate(preds, static_clip)
        assert report.mean["f1"] == 1.0 and len(report.per_frame) == len(static_clip)

    def test_evaluate_segmentation(self, static_clip):
        preds = [TaskOutput(probs=oracle_segmenter(f, 4)) for f in static_clip.frames]
        assert evaluate(preds, static_clip).mean == {"miou": 1.0}

    def test_evaluate_rejects_misaligned_streams(self, static_clip):
        with pytest.raises(ValueError, match="misaligned"):
            evaluate([], static_clip)

    def test_truth_detections(self):
        (det,) = truth_detections([{"frame": 0, "object_id": 1, "box": [1, 2, 3, 4], "class": 2}])
        assert det.box == (1, 2, 3, 4) and det.class_id == 2 and det.score == 1.0
