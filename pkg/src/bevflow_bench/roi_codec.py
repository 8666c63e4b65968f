"""
Synthetic BEV feature grids, ROI decoding and collaboration messages.

A grid cell carries the detection tuple of the object covering it:

    [0]      confidence
    [1..2]   offset from the cell center to the box center, (dh, dw) in cells
    [3..4]   (length, width) in meters
    [5..6]   (cos, sin) of the heading
    [7..D-1] signature of the object the cell was written for

Grids may also carry a per-cell correction (dh, dw, dheading) that decoding
adds on top of the offset and heading channels. Warping uses it to keep
decoded boxes sub-cell accurate while the feature vectors themselves are only
moved, never rewritten.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import OrientedBox, rotated_iou, wrap_angle
from .scene_sim import Observation

logger = logging.getLogger(__name__)

CONF = 0
OFFSET = slice(1, 3)
SIZE = slice(3, 5)
COS = 5
SIN = 6
SIGNATURE = 7
LAYOUT_CHANNELS = 7

# average number of voxels in one ROI
VOXELS_PER_ROI = 40


@dataclass(frozen=True)
class GridSpec:
    """
    Geometry of a BEV grid. Rows (h) run along +y, columns (w) along +x.
    """

    extent: tuple[float, float, float, float] = (-51.2, 51.2, -51.2, 51.2)
    cell: float = 0.4
    channels: int = 15

    def __post_init__(self):
        x_min, x_max, y_min, y_max = self.extent
        if self.cell <= 0 or x_max <= x_min or y_max <= y_min:
            raise ValueError(f"Invalid grid geometry {self.extent} with cell {self.cell}.")
        for span in (x_max - x_min, y_max - y_min):
            n = span / self.cell
            if abs(n - round(n)) > 1e-6:
                raise ValueError(
                    f"Extent span {span} is not an integer multiple of the cell size {self.cell}."
                )
        if self.channels < LAYOUT_CHANNELS:
            raise ValueError(f"A grid needs at least {LAYOUT_CHANNELS} channels, got {self.channels}.")

    @property
    def H(self) -> int:
        return int(round((self.extent[3] - self.extent[2]) / self.cell))

    @property
    def W(self) -> int:
        return int(round((self.extent[1] - self.extent[0]) / self.cell))

    @property
    def D(self) -> int:
        return self.channels

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.H, self.W, self.D

    def row_centers(self) -> np.ndarray:
        return self.extent[2] + (np.arange(self.H) + 0.5) * self.cell

    def col_centers(self) -> np.ndarray:
        return self.extent[0] + (np.arange(self.W) + 0.5) * self.cell

    def cell_window(self, box: OrientedBox) -> tuple[slice, slice]:
        """
        Row and column slices covering the axis-aligned hull of a box.
        """
        corners = box.corners()
        x_min, _, y_min, _ = self.extent
        w0 = max(0, int(math.floor((corners[:, 0].min() - x_min) / self.cell)))
        w1 = min(self.W, int(math.ceil((corners[:, 0].max() - x_min) / self.cell)) + 1)
        h0 = max(0, int(math.floor((corners[:, 1].min() - y_min) / self.cell)))
        h1 = min(self.H, int(math.ceil((corners[:, 1].max() - y_min) / self.cell)) + 1)
        return slice(h0, max(h0, h1)), slice(w0, max(w0, w1))

    def footprint(self, box: OrientedBox) -> tuple[np.ndarray, np.ndarray]:
        """
        (rows, cols) of every cell whose center lies inside the box.
        """
        hs, ws = self.cell_window(box)
        ys = self.row_centers()[hs]
        xs = self.col_centers()[ws]
        inside = box.contains(xs[None, :], ys[:, None])
        rows, cols = np.nonzero(inside)
        return rows + hs.start, cols + ws.start


@dataclass(frozen=True)
class BevGrid:
    spec: GridSpec
    data: np.ndarray
    correction: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if self.data.shape != self.spec.shape:
            raise ValueError(f"Grid data has shape {self.data.shape}, expected {self.spec.shape}.")
        if self.correction is None:
            object.__setattr__(
                self, "correction", np.zeros((self.spec.H, self.spec.W, 3))
            )
        self.data.flags.writeable = False
        self.correction.flags.writeable = False

    @classmethod
    def zeros(cls, spec: GridSpec) -> "BevGrid":
        return cls(spec=spec, data=np.zeros(spec.shape, dtype=np.float32))

    @property
    def confidence(self) -> np.ndarray:
        return self.data[..., CONF]

    def nonzero_mask(self) -> np.ndarray:
        return np.any(self.data != 0, axis=-1)

    def masked(self, mask: np.ndarray) -> "BevGrid":
        keep = mask[..., None]
        return BevGrid(
            spec=self.spec,
            data=np.where(keep, self.data, np.float32(0)),
            correction=np.where(keep, self.correction, 0.0),
        )


@dataclass(frozen=True)
class RoiSet:
    timestamp: float
    rois: list[tuple[int, OrientedBox]]

    def __post_init__(self):
        ids = [roi_id for roi_id, _ in self.rois]
        if len(set(ids)) != len(ids):
            raise ValueError(f"ROI ids must be unique, got {ids}.")

    def __len__(self) -> int:
        return len(self.rois)

    @property
    def boxes(self) -> list[OrientedBox]:
        return [box for _, box in self.rois]

    def box(self, roi_id: int) -> OrientedBox:
        return dict(self.rois)[roi_id]


@dataclass(frozen=True)
class CollabMessage:
    sender_id: int
    timestamp: float
    roi_set: RoiSet
    sparse_grid: BevGrid


def _signatures(n: int, dims: int, rng_seed: int) -> np.ndarray:
    if dims == 0:
        return np.zeros((n, 0))
    rng = np.random.default_rng(rng_seed)
    raw = rng.normal(size=(n, dims))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return raw / np.where(norms > 0, norms, 1.0)


def synthesize_grid(obs: Observation, spec: GridSpec, rng_seed: int) -> BevGrid:
    """
    Rasterizes an observation into a dense feature grid, standing in for a
    learned point-cloud encoder.

    Every cell whose center lies inside a box gets that box's detection tuple
    and a random unit signature drawn per box. Where boxes overlap, the one
    with the higher confidence owns the whole cell vector.

    Args:
        obs: The observation to encode.
        spec: Grid geometry.
        rng_seed: Seed of the signature draws.

    Returns:
        BevGrid: The dense grid.
    """
    data = np.zeros(spec.shape, dtype=np.float32)
    sigs = _signatures(len(obs.objects), spec.D - LAYOUT_CHANNELS, rng_seed)
    order = sorted(range(len(obs.objects)), key=lambda i: (obs.objects[i].confidence, i))
    row_c, col_c = spec.row_centers(), spec.col_centers()
    for i in order:
        box = obs.objects[i]
        rows, cols = spec.footprint(box)
        if len(rows) == 0:
            continue
        vec = np.empty((len(rows), spec.D))
        vec[:, CONF] = box.confidence
        vec[:, 1] = (box.y - row_c[rows]) / spec.cell
        vec[:, 2] = (box.x - col_c[cols]) / spec.cell
        vec[:, 3] = box.length
        vec[:, 4] = box.width
        vec[:, COS] = math.cos(box.heading)
        vec[:, SIN] = math.sin(box.heading)
        vec[:, SIGNATURE:] = sigs[i]
        data[rows, cols] = vec
    logger.debug(
        "Synthesized grid for agent %d at %.3fs: %d boxes, %d cells.",
        obs.agent_id,
        obs.timestamp,
        len(obs.objects),
        int(np.count_nonzero(data[..., CONF])),
    )
    return BevGrid(spec=spec, data=data)


def decode_candidates(grid: BevGrid, conf_threshold: float) -> list[OrientedBox]:
    """
    Decodes every cell above the confidence threshold into a candidate box.
    Cells that decode to the same box collapse into one candidate.
    """
    spec = grid.spec
    rows, cols = np.nonzero(grid.confidence > conf_threshold)
    if len(rows) == 0:
        return []
    vec = grid.data[rows, cols].astype(np.float64)
    corr = grid.correction[rows, cols]
    y = spec.row_centers()[rows] + (vec[:, 1] + corr[:, 0]) * spec.cell
    x = spec.col_centers()[cols] + (vec[:, 2] + corr[:, 1]) * spec.cell
    heading = wrap_angle(np.arctan2(vec[:, SIN], vec[:, COS]) + corr[:, 2])
    table = np.column_stack([vec[:, CONF], x, y, vec[:, 3], vec[:, 4], heading])
    _, first = np.unique(np.round(table, 6), axis=0, return_index=True)
    return [
        OrientedBox(
            x=float(table[i, 1]),
            y=float(table[i, 2]),
            length=float(table[i, 3]),
            width=float(table[i, 4]),
            heading=float(table[i, 5]),
            confidence=float(table[i, 0]),
        )
        for i in np.sort(first)
        if table[i, 3] > 0 and table[i, 4] > 0
    ]


def nms(boxes: list[OrientedBox], iou_threshold: float) -> list[OrientedBox]:
    """
    Greedy non-maximum suppression with rotated IoU.

    Boxes are visited by descending confidence (ties broken by ascending x,
    then y); a box is dropped if it overlaps an already kept box with
    IoU >= iou_threshold.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}.")
    kept: list[OrientedBox] = []
    for box in sorted(boxes, key=lambda b: (-b.confidence, b.x, b.y)):
        if all(rotated_iou(box, other) < iou_threshold for other in kept):
            kept.append(box)
    return kept


def footprint_mask(spec: GridSpec, boxes: list[OrientedBox]) -> np.ndarray:
    mask = np.zeros((spec.H, spec.W), dtype=bool)
    for box in boxes:
        rows, cols = spec.footprint(box)
        mask[rows, cols] = True
    return mask


def generate_rois(
    grid: BevGrid,
    conf_threshold: float = 0.5,
    nms_iou: float = 0.3,
    k_roi: int | None = None,
    timestamp: float = 0.0,
) -> tuple[RoiSet, BevGrid]:
    """
    Decodes ROIs from a grid and masks the grid down to their footprints.

    Args:
        grid: A dense (or fused) grid.
        conf_threshold: Cells above this confidence become candidates.
        nms_iou: IoU at which a lower-confidence candidate is suppressed.
        k_roi: Keep at most this many ROIs (highest confidence first).
        timestamp: Timestamp stamped on the ROI set.

    Returns:
        tuple[RoiSet, BevGrid]: The ROIs and the sparse grid holding only the
        features inside ROI footprints.
    """
    if not 0 < conf_threshold < 1:
        raise ValueError(f"conf_threshold must lie in (0, 1), got {conf_threshold}.")
    boxes = nms(decode_candidates(grid, conf_threshold), nms_iou)
    if k_roi is not None:
        boxes = boxes[:k_roi]
    roi_set = RoiSet(timestamp=timestamp, rois=list(enumerate(boxes)))
    sparse = grid.masked(footprint_mask(grid.spec, boxes))
    return roi_set, sparse


def make_message(
    obs: Observation,
    spec: GridSpec,
    rng_seed: int,
    conf_threshold: float = 0.5,
    nms_iou: float = 0.3,
    k_roi: int | None = None,
) -> CollabMessage:
    """
    Runs the sender side of collaboration: encode, generate ROIs, mask, pack.
    """
    dense = synthesize_grid(obs, spec, rng_seed)
    roi_set, sparse = generate_rois(
        dense, conf_threshold, nms_iou, k_roi=k_roi, timestamp=obs.timestamp
    )
    return CollabMessage(
        sender_id=obs.agent_id, timestamp=obs.timestamp, roi_set=roi_set, sparse_grid=sparse
    )


def comm_volume(k_rois: int) -> float:
    """
    Communication volume in bits of voxel count, log2(40 * K) for K ROIs.
    """
    if k_rois < 1:
        logger.error("Communication volume needs at least one ROI, got %s.", k_rois)
        raise ValueError(f"k_rois must be at least 1, got {k_rois}.")
    voxels = VOXELS_PER_ROI * int(k_rois)
    exponent = voxels.bit_length() - 1
    # fraction quantized to 2**-40 so that exponent + fraction is exact and
    # doubling K adds exactly one bit
    fraction = round(math.log2(voxels / 2**exponent) * 2**40) / 2**40
    return exponent + fraction
