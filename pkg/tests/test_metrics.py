"""
Tests for shadow detection metrics against a per-pixel reference
"""
import numpy as np
import pandas as pd
import pytest

from src.evaluation.metrics import (
    CSV_COLUMNS,
    OVERALL,
    ConfusionCounts,
    MetricAccumulator,
    confusion,
    error_rates,
    frame_metrics,
)
from src.utils.exceptions import ValidationError


def brute_force(prob: np.ndarray, gt: np.ndarray, threshold=0.5, beta2=0.3):
    """Pixel-by-pixel loop reference for one frame (perfect empty-class policy)"""
    tp = fp = tn = fn = 0
    abs_error = 0.0
    for p, g in zip(prob.ravel().tolist(), gt.ravel().tolist()):
        predicted = p > threshold
        abs_error += abs(p - g)
        if predicted and g:
            tp += 1
        elif predicted and not g:
            fp += 1
        elif not predicted and g:
            fn += 1
        else:
            tn += 1
    n = prob.size
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    if tp + fn == 0:
        precision = tp / (tp + fp) if tp + fp else 1.0
    else:
        precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    denominator = beta2 * precision + recall
    fbeta = (1 + beta2) * precision * recall / denominator if denominator else 0.0
    tpr = tp / (tp + fn) if tp + fn else 1.0
    tnr = tn / (tn + fp) if tn + fp else 1.0
    return {
        "mae": abs_error / n,
        "iou": iou,
        "fbeta": fbeta,
        "ber": 100 * (1 - 0.5 * (tpr + tnr)),
        "sber": 100 * (1 - tpr),
        "nber": 100 * (1 - tnr),
    }


class TestFrameMetrics:
    """Test cases for per-frame metrics"""

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            prob = rng.random((8, 8))
            # sprinkle empty / full masks and exact-threshold values
            fill = rng.random()
            gt = (rng.random((8, 8)) < fill).astype(np.uint8)
            prob[rng.random((8, 8)) < 0.05] = 0.5
            metrics = frame_metrics(prob, gt)
            expected = brute_force(prob, gt)
            for key, value in expected.items():
                assert getattr(metrics, key) == pytest.approx(value, abs=1e-12), key

    def test_half_overlap(self):
        pred = np.zeros((4, 4))
        gt = np.zeros((4, 4), dtype=np.uint8)
        pred[:, :2] = 1.0
        gt[:2, :] = 1
        metrics = frame_metrics(pred, gt)
        assert metrics.iou == pytest.approx(1 / 3)
        assert metrics.ber == pytest.approx(50.0)
        assert metrics.sber == pytest.approx(50.0)
        assert metrics.nber == pytest.approx(50.0)
        assert metrics.mae == pytest.approx(0.5)

    def test_perfect_prediction(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[1:3, 1:3] = 1
        metrics = frame_metrics(gt.astype(float), gt)
        assert metrics.iou == 1.0
        assert metrics.ber == 0.0
        assert metrics.fbeta == pytest.approx(1.0)

    def test_empty_class_policies(self):
        gt = np.zeros((2, 2), dtype=np.uint8)
        pred = np.zeros((2, 2))
        assert frame_metrics(pred, gt, policy="perfect").iou == 1.0
        assert frame_metrics(pred, gt, policy="zero").iou == 0.0

    def test_threshold_is_strict(self):
        gt = np.ones((1, 1), dtype=np.uint8)
        metrics = frame_metrics(np.full((1, 1), 0.5), gt)
        assert metrics.counts == ConfusionCounts(tp=0, fp=0, tn=0, fn=1)

    def test_non_binary_gt(self):
        with pytest.raises(ValidationError, match="binary"):
            frame_metrics(np.zeros((2, 2)), np.full((2, 2), 2))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError, match="shape mismatch"):
            frame_metrics(np.zeros((2, 2)), np.zeros((3, 3), dtype=np.uint8))

    def test_invalid_threshold(self):
        with pytest.raises(ValidationError, match="threshold"):
            frame_metrics(np.zeros((2, 2)), np.zeros((2, 2)), threshold=1.0)


class TestConfusion:
    def test_counts_sum_to_pixels(self):
        rng = np.random.default_rng(1)
        pred = rng.integers(0, 2, (5, 7))
        gt = rng.integers(0, 2, (5, 7))
        counts = confusion(pred, gt)
        assert counts.total == 35

    def test_error_rates(self):
        rates = error_rates(ConfusionCounts(tp=3, fp=1, tn=3, fn=1))
        assert rates["sber"] == pytest.approx(25.0)
        assert rates["nber"] == pytest.approx(25.0)
        assert rates["ber"] == pytest.approx(25.0)

    def test_ber_is_mean_of_class_rates(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            tp, fp, tn, fn = (int(v) for v in rng.integers(0, 20, 4))
            rates = error_rates(ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn))
            assert rates["ber"] == pytest.approx((rates["sber"] + rates["nber"]) / 2)

    def test_frame_ber_is_mean_of_class_rates(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            metrics = frame_metrics(rng.random((6, 6)), rng.integers(0, 2, (6, 6)))
            assert metrics.ber == pytest.approx((metrics.sber + metrics.nber) / 2)


class TestMetricAccumulator:
    """Test cases for per-video and overall aggregation"""

    def setup_method(self):
        self.accumulator = MetricAccumulator()

    def test_empty_report(self):
        frame = self.accumulator.report().to_dataframe()
        assert list(frame.columns) == CSV_COLUMNS
        assert frame["video_id"].tolist() == [OVERALL]
        assert frame.iloc[0]["frames"] == 0
        assert frame.iloc[0][CSV_COLUMNS[2:]].sum() == 0.0

    def test_ber_pools_counts_over_frames(self):
        full = np.ones((2, 2), dtype=np.uint8)
        empty = np.zeros((2, 2), dtype=np.uint8)
        # frame 1: all shadow, all missed; frame 2: no shadow, all correct
        self.accumulator.add("v", np.zeros((2, 2)), full)
        self.accumulator.add("v", np.zeros((2, 2)), empty)
        video = self.accumulator.report().per_video["v"]
        assert video.frames == 2
        assert video.sber == pytest.approx(100.0)
        assert video.nber == pytest.approx(0.0)
        assert video.ber == pytest.approx(50.0)
        # IoU is averaged over frames: 0 and 1 (empty-class perfect)
        assert video.iou == pytest.approx(0.5)

    def test_overall_pools_videos(self):
        rng = np.random.default_rng(2)
        for video_id in ("b", "a"):
            for _ in range(3):
                self.accumulator.add(video_id, rng.random((4, 4)), rng.integers(0, 2, (4, 4)))
        report = self.accumulator.report()
        assert list(report.per_video) == ["a", "b"]
        assert report.overall.frames == 6
        expected_mae = np.mean([report.per_video[v].mae for v in ("a", "b")])
        assert report.overall.mae == pytest.approx(expected_mae)

    def test_csv(self, tmp_path):
        self.accumulator.add("v", np.ones((2, 2)), np.ones((2, 2), dtype=np.uint8))
        path = self.accumulator.report().write_csv(tmp_path / "metrics.csv")
        frame = pd.read_csv(path)
        assert frame["video_id"].tolist() == ["v", OVERALL]
        assert frame.loc[0, "iou"] == pytest.approx(1.0)
