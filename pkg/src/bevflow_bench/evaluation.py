"""
Detection metrics: rotated IoU, average precision at an IoU threshold and
center-error statistics of true positives.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .boxes import OrientedBox, rotated_iou

logger = logging.getLogger(__name__)

__all__ = [
    "EMPTY_STATS",
    "NO_GROUND_TRUTH",
    "EvalRecord",
    "PrCurve",
    "average_precision",
    "center_error_stats",
    "match_detections",
    "pr_curve",
    "rotated_iou",
]


class _Marker:
    def __init__(self, name: str):
        self.name = name

    def __repr__(self) -> str:
        return self.name

    def __bool__(self) -> bool:
        return False


# average_precision over records without any ground truth
NO_GROUND_TRUTH = _Marker("NO_GROUND_TRUTH")
# center_error_stats without any true positive
EMPTY_STATS = _Marker("EMPTY_STATS")


@dataclass(frozen=True)
class EvalRecord:
    scene_id: int
    timestamp: float
    detections: list[OrientedBox]
    ground_truth: list[OrientedBox]


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float
    n_ground_truth: int = 0

    def __len__(self) -> int:
        return len(self.recall)


@dataclass(frozen=True)
class Match:
    record: int
    detection: OrientedBox
    ground_truth: OrientedBox | None
    iou: float

    @property
    def is_tp(self) -> bool:
        return self.ground_truth is not None

    @property
    def center_error(self) -> float:
        if self.ground_truth is None:
            return float("nan")
        return float(np.hypot(self.detection.x - self.ground_truth.x, self.detection.y - self.ground_truth.y))


def match_detections(records: list[EvalRecord], iou_threshold: float) -> list[Match]:
    """
    Pools the detections of all records by descending confidence and matches
    each to the unmatched ground truth box of its record with the highest IoU.
    A detection is a true positive if that IoU reaches the threshold.

    Ties in confidence are broken by record order, then by the detection's
    position in its record, so the result does not depend on dict or set order.
    """
    if not 0 < iou_threshold < 1:
        logger.error("IoU threshold %s is outside (0, 1).", iou_threshold)
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}.")
    pooled = sorted(
        (
            (-det.confidence, r, i, det)
            for r, record in enumerate(records)
            for i, det in enumerate(record.detections)
        ),
        key=lambda item: item[:3],
    )
    taken = [np.zeros(len(record.ground_truth), dtype=bool) for record in records]
    matches = []
    for _, r, _, det in pooled:
        best, best_iou = -1, 0.0
        for g, gt in enumerate(records[r].ground_truth):
            if taken[r][g]:
                continue
            iou = rotated_iou(det, gt)
            if iou > best_iou:
                best, best_iou = g, iou
        if best >= 0 and best_iou >= iou_threshold:
            taken[r][best] = True
            matches.append(Match(record=r, detection=det, ground_truth=records[r].ground_truth[best], iou=best_iou))
        else:
            matches.append(Match(record=r, detection=det, ground_truth=None, iou=best_iou))
    return matches


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    # all-point interpolation
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def pr_curve(records: list[EvalRecord], iou_threshold: float):
    """
    The precision/recall curve of pooled detections.

    Returns:
        PrCurve | NO_GROUND_TRUTH: The curve, or the marker if there is no
        ground truth to recall.
    """
    matches = match_detections(records, iou_threshold)
    n_gt = sum(len(r.ground_truth) for r in records)
    if n_gt == 0:
        return NO_GROUND_TRUTH
    tp = np.cumsum([m.is_tp for m in matches], dtype=float)
    fp = np.cumsum([not m.is_tp for m in matches], dtype=float)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    return PrCurve(
        recall=recall,
        precision=precision,
        ap=_envelope_area(recall, precision),
        n_ground_truth=n_gt,
    )


def average_precision(records: list[EvalRecord], iou_threshold: float):
    """
    Area under the precision envelope of the pooled PR curve.

    Args:
        records: Detections and ground truth per ego timestamp.
        iou_threshold: IoU a detection needs to count as a true positive.

    Returns:
        float | NO_GROUND_TRUTH: The AP in [0, 1], or the marker if the
        records hold no ground truth.
    """
    curve = pr_curve(records, iou_threshold)
    if curve is NO_GROUND_TRUTH:
        logger.warning("Average precision is undefined without ground truth.")
        return NO_GROUND_TRUTH
    return curve.ap


def center_error_stats(records: list[EvalRecord], iou_threshold: float = 0.5):
    """
    (mean, median, 90th percentile) of the center distance of true positives
    in meters, or EMPTY_STATS without true positives.
    """
    errors = [m.center_error for m in match_detections(records, iou_threshold) if m.is_tp]
    if not errors:
        return EMPTY_STATS
    values = np.asarray(errors)
    return float(np.mean(values)), float(np.median(values)), float(np.percentile(values, 90))
