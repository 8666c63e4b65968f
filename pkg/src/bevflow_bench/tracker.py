"""
Association of ROIs across consecutive messages of one sender, and the
per-ROI tracklets built from it.
"""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import OrientedBox, wrap_angle
from .roi_codec import RoiSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostMatrix:
    """
    Rows are ROIs of the earlier frame, columns ROIs of the later frame.
    Infeasible pairs cost +inf.
    """

    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class MatchResult:
    pairs: list[tuple[int, int, float]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]

    def total_cost(self) -> float:
        return float(sum(cost for _, _, cost in self.pairs))


def build_cost_matrix(prev: RoiSet, next: RoiSet, half_angle: float = math.pi / 4) -> CostMatrix:
    """
    Center distances between every earlier ROI p and later ROI q, restricted
    to q lying within +-half_angle of p's heading, either in front of p or
    behind it. Coincident centers are always feasible at cost 0.

    Args:
        prev: ROIs of the earlier frame.
        next: ROIs of the later frame.
        half_angle: Half-width of the front and rear cones in radians.

    Returns:
        CostMatrix: The (len(prev), len(next)) costs.
    """
    if not 0 < half_angle <= math.pi / 2:
        raise ValueError(f"half_angle must lie in (0, pi/2], got {half_angle}.")
    p = np.array([[b.x, b.y, b.heading] for b in prev.boxes]).reshape(-1, 3)
    q = np.array([[b.x, b.y] for b in next.boxes]).reshape(-1, 2)
    dx = q[None, :, 0] - p[:, None, 0]
    dy = q[None, :, 1] - p[:, None, 1]
    dist = np.hypot(dx, dy)
    off = np.abs(wrap_angle(np.arctan2(dy, dx) - p[:, None, 2]))
    front = off <= half_angle
    rear = (math.pi - off) <= half_angle
    feasible = front | rear | (dist == 0)
    return CostMatrix(values=np.where(feasible, dist, np.inf).reshape(len(p), len(q)))


def _post_process(
    pairs: list[tuple[int, int, float]], shape: tuple[int, int], max_cost: float
) -> MatchResult:
    kept = sorted((r, c, cost) for r, c, cost in pairs if math.isfinite(cost) and cost <= max_cost)
    rows = {r for r, _, _ in kept}
    cols = {c for _, c, _ in kept}
    return MatchResult(
        pairs=kept,
        unmatched_rows=[r for r in range(shape[0]) if r not in rows],
        unmatched_cols=[c for c in range(shape[1]) if c not in cols],
    )


def greedy_match(cost: CostMatrix, max_cost: float) -> MatchResult:
    """
    Greedy association: rows are visited in ascending order of their minimum
    cost, and each takes its cheapest finite column not claimed yet. Pairs
    costing more than max_cost are then dropped.

    Visiting rows by their minimum makes the result independent of the order
    in which the ROIs were listed.
    """
    if max_cost <= 0:
        raise ValueError(f"max_cost must be positive, got {max_cost}.")
    values = cost.values
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return _post_process([], cost.shape, max_cost)
    row_min = values.min(axis=1)
    claimed = np.zeros(n_cols, dtype=bool)
    pairs = []
    for r in sorted(range(n_rows), key=lambda r: (row_min[r], r)):
        candidates = np.where(claimed, np.inf, values[r])
        c = int(np.argmin(candidates))
        if math.isfinite(candidates[c]):
            claimed[c] = True
            pairs.append((r, c, float(values[r, c])))
    return _post_process(pairs, cost.shape, max_cost)


def hungarian_match(cost: CostMatrix, max_cost: float) -> MatchResult:
    """
    Optimal assignment over the pairs that are finite and within max_cost:
    the most such pairs, and among those the least total cost.

    Greedy matching never keeps more pairs than this, and when it keeps as
    many, it never costs less.
    """
    if max_cost <= 0:
        raise ValueError(f"max_cost must be positive, got {max_cost}.")
    values = cost.values
    if values.size == 0:
        return _post_process([], cost.shape, max_cost)
    feasible = np.isfinite(values) & (values <= max_cost)
    # exceeds any total of feasible costs, so fewer infeasible pairs always wins
    big = 1.0 + 2.0 * (np.abs(values[feasible]).sum() if feasible.any() else 1.0)
    rows, cols = linear_sum_assignment(np.where(feasible, values, big))
    pairs = [(int(r), int(c), float(values[r, c])) for r, c in zip(rows, cols)]
    return _post_process(pairs, cost.shape, max_cost)


MATCHERS = {"greedy": greedy_match, "hungarian": hungarian_match}


@dataclass
class Tracklet:
    """
    Irregularly timestamped (t, x, y, heading) history of one ROI.
    """

    track_id: int
    states: deque
    last_size: tuple[float, float]
    last_confidence: float = 1.0
    missed: int = 0

    @property
    def last(self) -> tuple[float, float, float, float]:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.states)

    def as_array(self) -> np.ndarray:
        return np.array(self.states, dtype=float).reshape(-1, 4)


def make_tracklet(
    track_id: int, states: list[tuple[float, float, float, float]], size=(4.5, 1.9), k: int = 3
) -> Tracklet:
    times = [s[0] for s in states]
    if not states or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError(f"Tracklet states need strictly increasing timestamps, got {times}.")
    return Tracklet(track_id=track_id, states=deque(states, maxlen=k), last_size=tuple(size))


@dataclass
class TrackStore:
    """
    Tracklets of one sender, plus the latest frame they were matched against.
    """

    sender_id: int
    k: int = 3
    staleness: int = 2
    tracklets: dict[int, Tracklet] = field(default_factory=dict)
    latest: RoiSet | None = None
    # track id of every ROI of the latest frame, by ROI position
    latest_tracks: list[int] = field(default_factory=list)
    next_id: int = 0

    def live_tracks(self) -> list[int]:
        """
        Ids of the tracklets that rows of the next cost matrix refer to, in row order.
        """
        return sorted(self.tracklets)

    def rows(self) -> RoiSet:
        """
        The last state of every live tracklet as one ROI set, ROI ids being
        track ids. Tracklets that missed recent frames still take part.
        """
        boxes = []
        for tid in self.live_tracks():
            tracklet = self.tracklets[tid]
            _, x, y, heading = tracklet.last
            length, width = tracklet.last_size
            boxes.append(
                (tid, OrientedBox(x, y, length, width, heading, confidence=tracklet.last_confidence))
            )
        timestamp = -math.inf if self.latest is None else self.latest.timestamp
        return RoiSet(timestamp=timestamp, rois=boxes)

    def current(self) -> list[tuple[int, Tracklet]]:
        """
        (roi_id, tracklet) for every ROI of the latest frame.
        """
        if self.latest is None:
            return []
        return [
            (roi_id, self.tracklets[tid])
            for (roi_id, _), tid in zip(self.latest.rois, self.latest_tracks)
        ]


def update_tracklets(store: TrackStore, match: MatchResult, next: RoiSet) -> TrackStore:
    """
    Extends matched tracklets with the ROIs of the next frame, opens new
    tracklets for unmatched ROIs and drops tracklets that went unmatched for
    ``staleness`` consecutive frames.

    Args:
        store: The sender's tracklets; updated in place and returned.
        match: Association between the live tracklets (rows, in
            :meth:`TrackStore.live_tracks` order) and next (columns).
        next: The new frame.

    Returns:
        TrackStore: The updated store.
    """
    if store.latest is not None and next.timestamp <= store.latest.timestamp:
        logger.error(
            "Sender %d: frame at %.3fs does not follow %.3fs.",
            store.sender_id,
            next.timestamp,
            store.latest.timestamp,
        )
        raise ValueError(
            f"Frame timestamp {next.timestamp} must exceed the latest stored "
            f"timestamp {store.latest.timestamp}."
        )
    live = store.live_tracks()
    n_prev = len(live)
    for r, c, _ in match.pairs:
        if not (0 <= r < n_prev and 0 <= c < len(next)):
            raise ValueError(f"Match pair ({r}, {c}) does not fit frames of {n_prev} and {len(next)} ROIs.")

    col_track = {c: live[r] for r, c, _ in match.pairs}
    touched = set()
    new_tracks = []
    for c, (_, box) in enumerate(next.rois):
        tid = col_track.get(c)
        if tid is None:
            tid = store.next_id
            store.next_id += 1
            store.tracklets[tid] = Tracklet(track_id=tid, states=deque(maxlen=store.k), last_size=(box.length, box.width))
        tracklet = store.tracklets[tid]
        tracklet.states.append((next.timestamp, box.x, box.y, box.heading))
        tracklet.last_size = (box.length, box.width)
        tracklet.last_confidence = box.confidence
        tracklet.missed = 0
        touched.add(tid)
        new_tracks.append(tid)

    for tid in list(store.tracklets):
        if tid in touched:
            continue
        store.tracklets[tid].missed += 1
        if store.tracklets[tid].missed >= store.staleness:
            del store.tracklets[tid]

    store.latest = next
    store.latest_tracks = new_tracks
    logger.debug(
        "Sender %d at %.3fs: %d matched, %d new, %d live tracklets.",
        store.sender_id,
        next.timestamp,
        len(match.pairs),
        len(match.unmatched_cols),
        len(store.tracklets),
    )
    return store


def track_frames(
    frames: list[RoiSet],
    sender_id: int,
    k: int = 3,
    half_angle: float = math.pi / 4,
    matcher: str = "greedy",
    staleness: int = 2,
    speed_cap: float = 105.0 / 3.6,
    cost_margin: float = 3.0,
    dump=None,
) -> TrackStore:
    """
    Runs association over a sender's frames in time order and returns the
    resulting store.

    Args:
        frames: The sender's ROI sets, oldest first.
        sender_id: The sending agent.
        k: History depth of every tracklet.
        half_angle: Feasible cone half-width for :func:`build_cost_matrix`.
        matcher: "greedy" or "hungarian".
        staleness: Unmatched frames after which a tracklet is dropped.
        speed_cap: Fastest plausible object speed in m/s; with the frame gap
            and ``cost_margin`` it sets the post-processing threshold.
        cost_margin: Slack in meters added to the threshold.
        dump: Optional file-like object receiving one JSON line per frame pair.

    Returns:
        TrackStore: The store after the last frame.
    """
    if matcher not in MATCHERS:
        raise ValueError(f"Unknown matcher '{matcher}'; choose from {sorted(MATCHERS)}.")
    store = TrackStore(sender_id=sender_id, k=k, staleness=staleness)
    for frame in frames:
        if not store.tracklets:
            match = MatchResult(pairs=[], unmatched_rows=[], unmatched_cols=list(range(len(frame))))
        else:
            rows = store.rows()
            gaps = frame.timestamp - np.array([store.tracklets[tid].last[0] for tid, _ in rows.rois])
            # each row is capped by the gap since its tracklet was last seen
            limits = max_match_cost(speed_cap, gaps, cost_margin)
            cost = build_cost_matrix(rows, frame, half_angle)
            cost = CostMatrix(np.where(cost.values <= limits[:, None], cost.values, np.inf))
            match = MATCHERS[matcher](cost, float(limits.max()))
            if dump is not None:
                dump.write(
                    json.dumps(
                        {
                            "sender_id": sender_id,
                            "frame_pair": [store.latest.timestamp, frame.timestamp],
                            "pairs": [[r, c] for r, c, _ in match.pairs],
                            "costs": [cost for _, _, cost in match.pairs],
                        }
                    )
                    + "\n"
                )
        update_tracklets(store, match, frame)
    return store


def max_match_cost(speed_cap: float, gap: float | np.ndarray, margin: float = 3.0) -> float | np.ndarray:
    """
    Post-processing threshold: the farthest an object at the speed cap can
    travel over the frame gap, plus a margin in meters.
    """
    return speed_cap * gap + margin


def write_match_dump(path: Path | str, frames: list[RoiSet], sender_id: int, **kwargs) -> TrackStore:
    with Path(path).open("w") as file:
        return track_frames(frames, sender_id, dump=file, **kwargs)
