"""
Pose prediction for tracklets and the BEV flow map built from it.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .boxes import OrientedBox, wrap_angle
from .estimator import MotionEstimator, predict
from .roi_codec import GridSpec
from .tracker import Tracklet, TrackStore

logger = logging.getLogger(__name__)

ESTIMATORS = ("cv", "mha", "identity")


def time_encode(t: float, d: int, unit: float = 0.1) -> np.ndarray:
    """
    Trigonometric code of a time in seconds: pairs (sin, cos) of t / unit at
    frequencies 10000^(-2e/d).

    Args:
        t: Time in seconds.
        d: Code dimension, even and positive.
        unit: Seconds per encoding unit.

    Returns:
        np.ndarray: The d-dimensional code.
    """
    if d < 2 or d % 2:
        logger.error("Time codes need a positive even dimension, got %s.", d)
        raise ValueError(f"d must be a positive even number, got {d}.")
    e = np.arange(d // 2)
    angle = (t / unit) / np.power(10000.0, 2.0 * e / d)
    code = np.empty(d)
    code[0::2] = np.sin(angle)
    code[1::2] = np.cos(angle)
    return code


@dataclass(frozen=True)
class PosePrediction:
    track_id: int
    x: float
    y: float
    heading: float
    # the ROI at its last observed pose
    source: OrientedBox
    roi_id: int | None = None
    fallback: bool = False

    @property
    def box(self) -> OrientedBox:
        return self.source.moved_to(self.x, self.y, self.heading)


@dataclass(frozen=True)
class BevFlowMap:
    """
    Per-cell displacement (dh, dw) in cells, and the heading change of the
    ROI owning the cell.
    """

    spec: GridSpec
    vectors: np.ndarray
    rotation: np.ndarray

    @classmethod
    def zeros(cls, spec: GridSpec) -> "BevFlowMap":
        return cls(spec=spec, vectors=np.zeros((spec.H, spec.W, 2)), rotation=np.zeros((spec.H, spec.W)))

    def is_zero(self) -> bool:
        return not (np.any(self.vectors) or np.any(self.rotation))


def _source_box(tracklet: Tracklet) -> OrientedBox:
    _, x, y, heading = tracklet.last
    length, width = tracklet.last_size
    return OrientedBox(x=x, y=y, length=length, width=width, heading=heading, confidence=tracklet.last_confidence)


def _check_query(tracklet: Tracklet, t_query: float) -> None:
    if t_query < tracklet.last[0]:
        logger.error(
            "Query %.3fs precedes the last state %.3fs of tracklet %d.",
            t_query,
            tracklet.last[0],
            tracklet.track_id,
        )
        raise ValueError(f"t_query {t_query} precedes the last tracklet timestamp {tracklet.last[0]}.")


def zero_motion(tracklet: Tracklet, roi_id: int | None = None, fallback: bool = True) -> PosePrediction:
    source = _source_box(tracklet)
    return PosePrediction(
        track_id=tracklet.track_id,
        x=source.x,
        y=source.y,
        heading=source.heading,
        source=source,
        roi_id=roi_id,
        fallback=fallback,
    )


def estimate_pose_cv(tracklet: Tracklet, t_query: float, roi_id: int | None = None) -> PosePrediction:
    """
    Constant-velocity prediction: a least-squares line through x(t) and y(t)
    extrapolated to t_query, and the heading advanced at the angular rate of
    the last two headings.

    A single-state tracklet gets the zero-motion prediction, flagged as a
    fallback.
    """
    _check_query(tracklet, t_query)
    if len(tracklet) < 2:
        return zero_motion(tracklet, roi_id)
    states = tracklet.as_array()
    t_n = states[-1, 0]
    if t_query == t_n:
        return zero_motion(tracklet, roi_id, fallback=False)
    rel = states[:, 0] - t_n
    design = np.column_stack([np.ones_like(rel), rel])
    coef, *_ = np.linalg.lstsq(design, states[:, 1:3], rcond=None)
    dt = t_query - t_n
    x, y = coef[0] + coef[1] * dt
    rate = wrap_angle(states[-1, 3] - states[-2, 3]) / (states[-1, 0] - states[-2, 0])
    return PosePrediction(
        track_id=tracklet.track_id,
        x=float(x),
        y=float(y),
        heading=float(wrap_angle(states[-1, 3] + rate * dt)),
        source=_source_box(tracklet),
        roi_id=roi_id,
    )


def estimate_pose(
    tracklet: Tracklet, t_query: float, params: MotionEstimator, roi_id: int | None = None
) -> PosePrediction:
    """
    Attention-based prediction of a tracklet's pose at t_query.

    Args:
        tracklet: The ROI's history.
        t_query: Query time, not before the last state.
        params: The trained estimator.
        roi_id: ROI id stamped on the prediction.

    Returns:
        PosePrediction: The predicted pose. Single-state tracklets fall back to
        zero motion.
    """
    _check_query(tracklet, t_query)
    if len(tracklet) < 2:
        return zero_motion(tracklet, roi_id)
    (x, y, heading), = predict(params, [tracklet.as_array()], [t_query])
    return PosePrediction(
        track_id=tracklet.track_id,
        x=float(x),
        y=float(y),
        heading=float(heading),
        source=_source_box(tracklet),
        roi_id=roi_id,
    )


def predict_store(
    store: TrackStore, t_query: float, estimator: str = "cv", params: MotionEstimator | None = None
) -> list[PosePrediction]:
    """
    Predictions for every ROI of the store's latest frame. Attention
    predictions are computed in one batch.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"Unknown estimator '{estimator}'; choose from {ESTIMATORS}.")
    current = store.current()
    if estimator == "identity":
        return [zero_motion(t, roi_id, fallback=False) for roi_id, t in current]
    if estimator == "cv":
        return [estimate_pose_cv(t, t_query, roi_id) for roi_id, t in current]
    if params is None:
        raise ValueError("The attention estimator needs trained params.")

    for _, tracklet in current:
        _check_query(tracklet, t_query)
    batched = [(roi_id, t) for roi_id, t in current if len(t) >= 2]
    poses = predict(params, [t.as_array() for _, t in batched], [t_query] * len(batched))
    by_roi = {
        roi_id: PosePrediction(
            track_id=t.track_id,
            x=float(pose[0]),
            y=float(pose[1]),
            heading=float(pose[2]),
            source=_source_box(t),
            roi_id=roi_id,
        )
        for (roi_id, t), pose in zip(batched, poses)
    }
    predictions = [by_roi.get(roi_id) or zero_motion(t, roi_id) for roi_id, t in current]
    n_fallback = sum(p.fallback for p in predictions)
    if n_fallback:
        logger.debug("Sender %d: %d single-state tracklets use zero motion.", store.sender_id, n_fallback)
    return predictions


def build_flow_map(predictions: list[PosePrediction], spec: GridSpec) -> BevFlowMap:
    """
    Rasterizes predictions into a flow map. Each cell center p inside a
    source ROI moves to R(dheading) (p - c_old) + c_new; the map holds
    p' - p in (dh, dw) cells and is zero outside all source ROIs. A cell
    inside several ROIs takes the motion of the most confident one, ties going
    to the lower track id.
    """
    vectors = np.zeros((spec.H, spec.W, 2))
    rotation = np.zeros((spec.H, spec.W))
    row_c, col_c = spec.row_centers(), spec.col_centers()
    # ascending, so the winner is written last
    for pred in sorted(predictions, key=lambda p: (p.source.confidence, -p.track_id)):
        src = pred.source
        rows, cols = spec.footprint(src)
        if len(rows) == 0:
            continue
        dheading = float(wrap_angle(pred.heading - src.heading))
        c, s = math.cos(dheading), math.sin(dheading)
        rx = col_c[cols] - src.x
        ry = row_c[rows] - src.y
        dx = (c - 1.0) * rx - s * ry + (pred.x - src.x)
        dy = s * rx + (c - 1.0) * ry + (pred.y - src.y)
        vectors[rows, cols, 0] = dy / spec.cell
        vectors[rows, cols, 1] = dx / spec.cell
        rotation[rows, cols] = dheading
    return BevFlowMap(spec=spec, vectors=vectors, rotation=rotation)
