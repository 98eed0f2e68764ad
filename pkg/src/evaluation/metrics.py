"""
Shadow detection metrics: MAE, IoU, F-beta, BER, S-BER, N-BER

MAE, IoU and F-beta are averaged over frames; the BER family is computed from
confusion counts pooled over frames.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd

from src.utils.exceptions import ValidationError

CSV_COLUMNS = ["video_id", "frames", "mae", "iou", "fbeta", "ber", "sber", "nber"]
OVERALL = "__all__"
POLICIES = ("perfect", "zero")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def n_pos(self) -> int:
        return self.tp + self.fn

    @property
    def n_neg(self) -> int:
        return self.tn + self.fp

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def _as_array(values) -> np.ndarray:
    if hasattr(values, "detach"):
        values = values.detach().cpu().numpy()
    return np.asarray(values)


def _check_binary(values: np.ndarray, name: str) -> np.ndarray:
    if not np.all((values == 0) | (values == 1)):
        raise ValidationError(f"{name} must be binary")
    return values.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    """Exact pixel counts of a binary prediction against a binary mask"""
    pred, gt = _as_array(pred), _as_array(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"confusion shape mismatch: {pred.shape} vs {gt.shape}")
    pred, gt = _check_binary(pred, "pred"), _check_binary(gt, "gt")
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


def _ratio(numerator: int, denominator: int, policy: str) -> float:
    """numerator / denominator; an empty denominator is perfect or zero by policy"""
    if denominator == 0:
        return 1.0 if policy == "perfect" else 0.0
    return numerator / denominator


def error_rates(counts: ConfusionCounts, policy: str = "perfect") -> Dict[str, float]:
    """BER, S-BER and N-BER in percent"""
    tpr = _ratio(counts.tp, counts.n_pos, policy)
    tnr = _ratio(counts.tn, counts.n_neg, policy)
    return {
        "ber": 100.0 * (1.0 - 0.5 * (tpr + tnr)),
        "sber": 100.0 * (1.0 - tpr),
        "nber": 100.0 * (1.0 - tnr),
    }


@dataclass
class FrameMetrics:
    mae: float
    iou: float
    fbeta: float
    ber: float
    sber: float
    nber: float
    counts: ConfusionCounts


def frame_metrics(
    prob,
    gt,
    threshold: float = 0.5,
    beta2: float = 0.3,
    policy: str = "perfect",
) -> FrameMetrics:
    """
    Metrics of one frame

    Args:
        prob: predicted shadow probabilities (or a binary prediction)
        gt: binary ground truth
        threshold: binarization threshold, a pixel is shadow if p > threshold
        beta2: beta squared of the F-measure
        policy: value of a ratio with an empty denominator, "perfect" or "zero"
    """
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    if policy not in POLICIES:
        raise ValidationError(f"Unknown empty-class policy '{policy}'")
    prob = _as_array(prob).astype(np.float64)
    gt = _as_array(gt)
    if prob.shape != gt.shape:
        raise ValidationError(f"metrics shape mismatch: {prob.shape} vs {gt.shape}")
    gt_bool = _check_binary(gt, "gt")

    counts = confusion((prob > threshold).astype(np.uint8), gt_bool.astype(np.uint8))
    mae = float(np.abs(prob - gt_bool).mean()) if prob.size else 0.0
    iou = _ratio(counts.tp, counts.tp + counts.fp + counts.fn, policy)

    precision = _ratio(counts.tp, counts.tp + counts.fp, policy if counts.n_pos == 0 else "zero")
    recall = _ratio(counts.tp, counts.n_pos, policy)
    denominator = beta2 * precision + recall
    fbeta = (1 + beta2) * precision * recall / denominator if denominator > 0 else 0.0

    return FrameMetrics(mae=mae, iou=iou, fbeta=fbeta, counts=counts, **error_rates(counts, policy))


@dataclass
class VideoMetrics:
    frames: int
    mae: float
    iou: float
    fbeta: float
    ber: float
    sber: float
    nber: float


@dataclass
class MetricReport:
    per_video: Dict[str, VideoMetrics]
    overall: VideoMetrics

    def to_dataframe(self) -> pd.DataFrame:
        rows = [
            {"video_id": video_id, **vars(metrics)}
            for video_id, metrics in sorted(self.per_video.items())
        ]
        rows.append({"video_id": OVERALL, **vars(self.overall)})
        return pd.DataFrame(rows, columns=CSV_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_dataframe().to_csv(path, index=False, float_format="%.6f")
        return path


@dataclass
class _VideoAccumulator:
    frames: List[FrameMetrics] = field(default_factory=list)
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)


class MetricAccumulator:
    """Collects per-frame metrics and reduces them in a fixed order"""

    def __init__(self, threshold: float = 0.5, beta2: float = 0.3, policy: str = "perfect"):
        self.threshold = threshold
        self.beta2 = beta2
        self.policy = policy
        self._videos: Dict[str, _VideoAccumulator] = {}

    def add(self, video_id: str, prob, gt) -> FrameMetrics:
        metrics = frame_metrics(prob, gt, self.threshold, self.beta2, self.policy)
        video = self._videos.setdefault(video_id, _VideoAccumulator())
        video.frames.append(metrics)
        video.counts = video.counts + metrics.counts
        return metrics

    def _reduce(self, frames: List[FrameMetrics], counts: ConfusionCounts) -> VideoMetrics:
        if not frames:
            return VideoMetrics(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        return VideoMetrics(
            frames=len(frames),
            mae=float(np.mean([f.mae for f in frames])),
            iou=float(np.mean([f.iou for f in frames])),
            fbeta=float(np.mean([f.fbeta for f in frames])),
            **error_rates(counts, self.policy),
        )

    def report(self) -> MetricReport:
        per_video = {}
        all_frames: List[FrameMetrics] = []
        pooled = ConfusionCounts()
        for video_id in sorted(self._videos):
            video = self._videos[video_id]
            per_video[video_id] = self._reduce(video.frames, video.counts)
            all_frames.extend(video.frames)
            pooled = pooled + video.counts
        return MetricReport(per_video=per_video, overall=self._reduce(all_frames, pooled))
