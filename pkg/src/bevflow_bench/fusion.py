"""
Feature warping along a flow map, max-fusion of grids at the ego timestamp
and decoding of the fused grid.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .boxes import OrientedBox
from .flow import BevFlowMap, PosePrediction
from .roi_codec import CONF, OFFSET, BevGrid, RoiSet, decode_candidates, nms

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WarpedGrid(BevGrid):
    """
    A grid whose cells were moved from a source grid. provenance[h, w] holds
    (sender, source row, source col) for every nonzero cell and -1 elsewhere.
    """

    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        if self.provenance is None:
            object.__setattr__(
                self, "provenance", np.full((self.spec.H, self.spec.W, 3), -1, dtype=np.int64)
            )


@dataclass(frozen=True)
class FusedGrid(BevGrid):
    contributors: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        if self.contributors is None:
            object.__setattr__(self, "contributors", self.nonzero_mask().astype(np.int64))


def warp_features(sparse: BevGrid, flow: BevFlowMap, sender_id: int = 0) -> WarpedGrid:
    """
    Moves every nonzero cell (h, w) of a sparse grid to
    (h + round(M[h, w, 0]), w + round(M[h, w, 1])). Feature vectors are copied
    unchanged; the sub-cell remainder of the flow and the ROI rotation go into
    the grid's correction so that decoding still lands on the moved box.

    Targets outside the grid are dropped. When several cells land on one
    target, the vector with the higher confidence wins, ties going to the
    lexicographically smaller source (h, w).

    Args:
        sparse: The collaborator's sparse grid.
        flow: Its flow map for the ego timestamp.
        sender_id: Sender recorded in the provenance.

    Returns:
        WarpedGrid: The moved grid.
    """
    spec = sparse.spec
    if flow.spec != spec:
        logger.error("Grid spec %s does not match flow spec %s.", spec, flow.spec)
        raise ValueError("The grid and the flow map must share one GridSpec.")
    rows, cols = np.nonzero(sparse.nonzero_mask())
    motion = flow.vectors[rows, cols]
    shift = np.rint(motion).astype(np.int64)
    target_h = rows + shift[:, 0]
    target_w = cols + shift[:, 1]
    inside = (target_h >= 0) & (target_h < spec.H) & (target_w >= 0) & (target_w < spec.W)
    rows, cols = rows[inside], cols[inside]
    motion, shift = motion[inside], shift[inside]
    target_h, target_w = target_h[inside], target_w[inside]

    conf = sparse.data[rows, cols, CONF]
    order = np.lexsort((cols, rows, -conf))
    _, first = np.unique((target_h * spec.W + target_w)[order], return_index=True)
    win = order[first]
    rows, cols, motion, shift = rows[win], cols[win], motion[win], shift[win]
    target_h, target_w = target_h[win], target_w[win]

    old = sparse.correction[rows, cols]
    theta = flow.rotation[rows, cols]
    offset = sparse.data[rows, cols, OFFSET].astype(np.float64)
    dh, dw = offset[:, 0] + old[:, 0], offset[:, 1] + old[:, 1]
    c, s = np.cos(theta), np.sin(theta)
    residual = motion - shift
    moved = np.column_stack(
        [
            s * dw + c * dh + residual[:, 0] - offset[:, 0],
            c * dw - s * dh + residual[:, 1] - offset[:, 1],
            old[:, 2] + theta,
        ]
    )
    still = np.all(motion == 0, axis=1) & (theta == 0)

    data = np.zeros(spec.shape, dtype=np.float32)
    correction = np.zeros((spec.H, spec.W, 3))
    provenance = np.full((spec.H, spec.W, 3), -1, dtype=np.int64)
    data[target_h, target_w] = sparse.data[rows, cols]
    correction[target_h, target_w] = np.where(still[:, None], old, moved)
    provenance[target_h, target_w] = np.column_stack([np.full(len(rows), sender_id), rows, cols])
    n_dropped = int(inside.size - inside.sum()) + int(inside.sum() - len(win))
    if n_dropped:
        logger.debug("Warp of sender %d dropped %d cells (off-grid or collided).", sender_id, n_dropped)
    return WarpedGrid(spec=spec, data=data, correction=correction, provenance=provenance)


def warp_boxes(roi_set: RoiSet, predictions: list[PosePrediction]) -> RoiSet:
    """
    Replaces every ROI's pose by its prediction, keeping size and confidence.
    ROIs without a prediction keep their box.
    """
    by_roi = {p.roi_id: p for p in predictions if p.roi_id is not None}
    return RoiSet(
        timestamp=roi_set.timestamp,
        rois=[
            (roi_id, box.moved_to(by_roi[roi_id].x, by_roi[roi_id].y, by_roi[roi_id].heading))
            if roi_id in by_roi
            else (roi_id, box)
            for roi_id, box in roi_set.rois
        ],
    )


def _greater(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Cellwise lexicographic a > b over the trailing axis.
    """
    differs = a != b
    first = np.argmax(differs, axis=-1)[..., None]
    av = np.take_along_axis(a, first, axis=-1)[..., 0]
    bv = np.take_along_axis(b, first, axis=-1)[..., 0]
    return differs.any(axis=-1) & (av > bv)


def fuse(ego: BevGrid, warped: list[BevGrid]) -> FusedGrid:
    """
    Vectorwise max-fusion: each cell keeps the whole vector of the contributor
    with the highest confidence. Remaining ties are broken by comparing the
    other channels and the correction in order, which makes the result
    independent of the contributor order.

    Args:
        ego: The ego agent's dense grid.
        warped: Collaborator grids moved to the ego timestamp.

    Returns:
        FusedGrid: The fused grid with the number of nonzero contributors per cell.
    """
    spec = ego.spec
    if any(g.spec != spec for g in warped):
        logger.error("All fused grids must share the ego grid spec %s.", spec)
        raise ValueError("All fused grids must share one GridSpec.")
    best_data = ego.data
    best_corr = ego.correction
    best_key = np.concatenate([best_data.astype(np.float64), best_corr], axis=-1)
    contributors = ego.nonzero_mask().astype(np.int64)
    for grid in warped:
        key = np.concatenate([grid.data.astype(np.float64), grid.correction], axis=-1)
        take = _greater(key, best_key)
        best_data = np.where(take[..., None], grid.data, best_data)
        best_corr = np.where(take[..., None], grid.correction, best_corr)
        best_key = np.where(take[..., None], key, best_key)
        contributors += grid.nonzero_mask()
    return FusedGrid(spec=spec, data=best_data, correction=best_corr, contributors=contributors)


def decode_detections(fused: BevGrid, conf_threshold: float = 0.5, nms_iou: float = 0.3) -> list[OrientedBox]:
    """
    Final detections of a fused grid, decoded exactly like ROIs are generated.
    """
    if not 0 < conf_threshold < 1:
        raise ValueError(f"conf_threshold must lie in (0, 1), got {conf_threshold}.")
    return nms(decode_candidates(fused, conf_threshold), nms_iou)


def merge_boxes(box_lists: list[list[OrientedBox]], nms_iou: float = 0.3) -> list[OrientedBox]:
    """
    Late fusion: the union of several agents' boxes, deduplicated by NMS.
    """
    return nms([box for boxes in box_lists for box in boxes], nms_iou)
