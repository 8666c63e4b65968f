"""
Oriented 2D boxes in the shared BEV frame and the geometry around them.

Headings are measured counterclockwise from the +x axis; the box length runs
along the heading direction and the width across it.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from shapely.geometry import Polygon


def wrap_angle(angle):
    """
    Wraps an angle (or an array of angles) into (-pi, pi].

    Angles already inside the interval are returned unchanged, bit for bit.
    """
    angle = np.asarray(angle, dtype=float)
    wrapped = np.where(
        (angle > -math.pi) & (angle <= math.pi),
        angle,
        math.pi - np.mod(math.pi - angle, 2 * math.pi),
    )
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class OrientedBox:
    """
    An oriented rectangle with a detection confidence.
    """

    x: float
    y: float
    length: float
    width: float
    heading: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(
                f"Box size must be positive, got ({self.length}, {self.width})."
            )
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def center(self) -> tuple[float, float]:
        return self.x, self.y

    @property
    def area(self) -> float:
        return self.length * self.width

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)

    def corners(self) -> np.ndarray:
        """
        Returns the four corners as a (4, 2) array in counterclockwise order.
        """
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def polygon(self) -> Polygon:
        return Polygon(self.corners())

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """
        Point-in-rectangle test for arrays of points (boundary counts as inside).
        """
        dx = np.asarray(xs, dtype=float) - self.x
        dy = np.asarray(ys, dtype=float) - self.y
        c, s = math.cos(self.heading), math.sin(self.heading)
        along = dx * c + dy * s
        across = -dx * s + dy * c
        return (np.abs(along) <= 0.5 * self.length) & (
            np.abs(across) <= 0.5 * self.width
        )

    def moved_to(self, x: float, y: float, heading: float) -> "OrientedBox":
        return replace(self, x=x, y=y, heading=heading)


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """
    Exact intersection-over-union of two oriented boxes, computed by clipping
    the two rectangles against each other.

    Degenerate (zero-area) boxes yield 0.
    """
    if a.area <= 0.0 or b.area <= 0.0:
        return 0.0
    if math.hypot(a.x - b.x, a.y - b.y) > a.half_diagonal + b.half_diagonal:
        return 0.0
    if (a.x, a.y, a.length, a.width, a.heading) == (
        b.x,
        b.y,
        b.length,
        b.width,
        b.heading,
    ):
        return 1.0
    inter = a.polygon().intersection(b.polygon()).area
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))
