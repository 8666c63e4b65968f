import itertools
import json
import math

import numpy as np
import pytest

from bevflow_bench.boxes import OrientedBox
from bevflow_bench.roi_codec import RoiSet
from bevflow_bench.tracker import (
    CostMatrix,
    MatchResult,
    TrackStore,
    build_cost_matrix,
    greedy_match,
    hungarian_match,
    make_tracklet,
    max_match_cost,
    track_frames,
    update_tracklets,
    write_match_dump,
)


def roi_set(t: float, centers: list[tuple[float, float, float]]) -> RoiSet:
    return RoiSet(
        timestamp=t,
        rois=[
            (i, OrientedBox(x=x, y=y, length=4.5, width=1.9, heading=h, confidence=0.9))
            for i, (x, y, h) in enumerate(centers)
        ],
    )


def brute_force_cost(values: np.ndarray) -> float:
    """
    Fewest infeasible pairs first, then the least finite cost, over every
    assignment of maximal size.
    """
    n_rows, n_cols = values.shape
    best = (math.inf, math.inf)
    if n_rows <= n_cols:
        assignments = ((list(range(n_rows)), list(p)) for p in itertools.permutations(range(n_cols), n_rows))
    else:
        assignments = ((list(p), list(range(n_cols))) for p in itertools.permutations(range(n_rows), n_cols))
    for rows, cols in assignments:
        costs = values[rows, cols]
        finite = np.isfinite(costs)
        best = min(best, (int((~finite).sum()), float(costs[finite].sum())))
    return best[1]


def test_cost_matrix_cones():
    prev = roi_set(0.0, [(0.0, 0.0, 0.0)])
    next = roi_set(0.1, [(5.0, 0.0, 0.0), (0.0, 5.0, 0.0), (-3.0, 0.0, 0.0), (0.0, 0.0, 0.0), (3.0, 2.0, 0.0)])
    costs = build_cost_matrix(prev, next).values[0]
    assert costs[0] == 5.0
    assert costs[1] == np.inf
    assert costs[2] == 3.0
    assert costs[3] == 0.0
    assert costs[4] == pytest.approx(math.hypot(3.0, 2.0))


def test_cost_matrix_empty_frames():
    assert build_cost_matrix(roi_set(0.0, []), roi_set(0.1, [(0.0, 0.0, 0.0)])).shape == (0, 1)
    with pytest.raises(ValueError):
        build_cost_matrix(roi_set(0.0, []), roi_set(0.1, []), half_angle=2.0)


def test_hungarian_is_optimal():
    rng = np.random.default_rng(0)
    for _ in range(200):
        shape = tuple(rng.integers(1, 6, size=2))
        values = rng.uniform(0.0, 10.0, size=shape)
        values[rng.random(size=shape) < 0.3] = np.inf
        result = hungarian_match(CostMatrix(values), max_cost=math.inf)
        assert result.total_cost() == pytest.approx(brute_force_cost(values), abs=1e-9)


def test_greedy_never_beats_hungarian():
    rng = np.random.default_rng(1)
    for _ in range(200):
        shape = tuple(rng.integers(1, 7, size=2))
        values = rng.uniform(0.0, 10.0, size=shape)
        values[rng.random(size=shape) < 0.3] = np.inf
        max_cost = rng.choice([6.0, 8.0, math.inf])
        optimal = hungarian_match(CostMatrix(values), max_cost)
        greedy = greedy_match(CostMatrix(values), max_cost)
        assert len(optimal.pairs) >= len(greedy.pairs)
        if len(optimal.pairs) == len(greedy.pairs):
            assert optimal.total_cost() <= greedy.total_cost() + 1e-9


def test_hungarian_prefers_more_pairs_over_a_lower_total():
    values = np.array([[1.0, 1.5], [1.0, np.inf]])
    greedy = greedy_match(CostMatrix(values), math.inf)
    assert greedy.pairs == [(0, 0, 1.0)]
    optimal = hungarian_match(CostMatrix(values), math.inf)
    assert optimal.pairs == [(0, 1, 1.5), (1, 0, 1.0)]
    # a pair over the threshold counts as infeasible
    capped = hungarian_match(CostMatrix(values), 1.2)
    assert capped.pairs in ([(0, 0, 1.0)], [(1, 0, 1.0)])
    assert capped.unmatched_cols == [1]


@pytest.mark.parametrize("matcher", [greedy_match, hungarian_match])
def test_matches_are_injective_and_capped(matcher):
    rng = np.random.default_rng(2)
    for _ in range(50):
        values = rng.uniform(0.0, 10.0, size=(5, 4))
        values[rng.random(size=(5, 4)) < 0.3] = np.inf
        result = matcher(CostMatrix(values), max_cost=6.0)
        rows = [r for r, _, _ in result.pairs]
        cols = [c for _, c, _ in result.pairs]
        assert len(set(rows)) == len(rows)
        assert len(set(cols)) == len(cols)
        assert all(cost <= 6.0 for _, _, cost in result.pairs)
        assert sorted(rows + result.unmatched_rows) == list(range(5))
        assert sorted(cols + result.unmatched_cols) == list(range(4))


def test_greedy_ignores_listing_order():
    values = np.array([[1.0, 2.0, 9.0], [0.5, 4.0, 9.0], [7.0, 8.0, 3.0]])
    result = greedy_match(CostMatrix(values), 10.0)
    flipped = greedy_match(CostMatrix(values[::-1]), 10.0)
    assert {(2 - r, c) for r, c, _ in flipped.pairs} == {(r, c) for r, c, _ in result.pairs}
    assert {(r, c) for r, c, _ in result.pairs} == {(1, 0), (0, 1), (2, 2)}


def test_match_rejects_bad_threshold():
    with pytest.raises(ValueError):
        greedy_match(CostMatrix(np.zeros((1, 1))), 0.0)
    with pytest.raises(ValueError):
        hungarian_match(CostMatrix(np.zeros((1, 1))), -1.0)


@pytest.mark.parametrize("matcher", ["greedy", "hungarian"])
def test_tracking_well_separated_objects(matcher):
    rng = np.random.default_rng(3)
    starts = [(20.0 * i, 20.0 * j) for i in range(4) for j in range(4)]
    headings = rng.uniform(-math.pi, math.pi, size=len(starts))
    speeds = rng.uniform(0.0, 20.0, size=len(starts))
    frames = []
    for step, t in enumerate([0.0, 0.1, 0.25, 0.3]):
        order = rng.permutation(len(starts)) if step else np.arange(len(starts))
        frames.append(
            roi_set(
                t,
                [
                    (x + v * t * math.cos(h), y + v * t * math.sin(h), h)
                    for x, y, h, v in (
                        (*starts[i], headings[i], speeds[i]) for i in order
                    )
                ],
            )
        )
    store = track_frames(frames, sender_id=1, matcher=matcher)
    assert len(store.tracklets) == len(starts)
    for tracklet in store.tracklets.values():
        assert len(tracklet) == 3
        states = tracklet.as_array()
        assert np.all(np.diff(states[:, 0]) > 0)
        assert np.all(states[:, 3] == states[0, 3])


def test_stale_tracklets_are_dropped():
    store = TrackStore(sender_id=1, staleness=2)
    first = roi_set(0.0, [(0.0, 0.0, 0.0), (50.0, 0.0, 0.0)])
    update_tracklets(store, MatchResult([], [], [0, 1]), first)
    second = roi_set(0.1, [(1.0, 0.0, 0.0)])
    update_tracklets(store, MatchResult([(0, 0, 1.0)], [1], []), second)
    assert sorted(store.tracklets) == [0, 1]
    assert store.tracklets[1].missed == 1
    third = roi_set(0.2, [(2.0, 0.0, 0.0)])
    update_tracklets(store, MatchResult([(0, 0, 1.0)], [], []), third)
    assert sorted(store.tracklets) == [0]
    assert [roi_id for roi_id, _ in store.current()] == [0]
    assert store.tracklets[0].as_array()[:, 1].tolist() == [0.0, 1.0, 2.0]


def test_update_rejects_time_travel():
    store = TrackStore(sender_id=1)
    update_tracklets(store, MatchResult([], [], [0]), roi_set(1.0, [(0.0, 0.0, 0.0)]))
    with pytest.raises(ValueError):
        update_tracklets(store, MatchResult([], [0], [0]), roi_set(1.0, [(0.0, 0.0, 0.0)]))
    with pytest.raises(ValueError):
        update_tracklets(store, MatchResult([(3, 0, 0.0)], [], []), roi_set(2.0, [(0.0, 0.0, 0.0)]))


def test_tracklet_depth_is_capped():
    frames = [roi_set(0.1 * i, [(0.5 * i, 0.0, 0.0)]) for i in range(6)]
    store = track_frames(frames, sender_id=1, k=4)
    (tracklet,) = store.tracklets.values()
    assert len(tracklet) == 4
    assert tracklet.last == pytest.approx((0.5, 2.5, 0.0, 0.0))


def test_make_tracklet_validates_times():
    with pytest.raises(ValueError):
        make_tracklet(0, [(0.2, 0.0, 0.0, 0.0), (0.1, 1.0, 0.0, 0.0)])
    with pytest.raises(ValueError):
        make_tracklet(0, [])


def test_unknown_matcher():
    with pytest.raises(ValueError):
        track_frames([], sender_id=1, matcher="auction")


def test_match_dump(tmp_path):
    frames = [roi_set(0.1 * i, [(0.5 * i, 0.0, 0.0)]) for i in range(3)]
    path = tmp_path / "matches.jsonl"
    write_match_dump(path, frames, sender_id=2)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 2
    assert lines[0]["pairs"] == [[0, 0]]
    assert lines[0]["costs"] == [pytest.approx(0.5)]
    assert max_match_cost(30.0, 0.1) == pytest.approx(6.0)


@pytest.mark.parametrize("matcher", ["greedy", "hungarian"])
def test_missed_object_continues_its_tracklet(matcher):
    frames = [
        roi_set(0.0, [(0.0, 0.0, 0.0), (40.0, 0.0, 0.0)]),
        roi_set(0.1, [(41.0, 0.0, 0.0)]),
        roi_set(0.2, [(2.0, 0.0, 0.0), (42.0, 0.0, 0.0)]),
    ]
    store = track_frames(frames, sender_id=1, matcher=matcher)
    assert sorted(store.tracklets) == [0, 1]
    assert store.tracklets[0].as_array()[:, :2].tolist() == [[0.0, 0.0], [0.2, 2.0]]
    assert store.tracklets[0].missed == 0
    assert len(store.tracklets[1]) == 3
    assert [(roi_id, t.track_id) for roi_id, t in store.current()] == [(0, 0), (1, 1)]


def test_rows_cover_every_live_tracklet():
    store = TrackStore(sender_id=1, staleness=3)
    update_tracklets(store, MatchResult([], [], [0, 1]), roi_set(0.0, [(0.0, 0.0, 0.0), (50.0, 0.0, 0.5)]))
    update_tracklets(store, MatchResult([(1, 0, 1.0)], [0], []), roi_set(0.1, [(51.0, 0.0, 0.5)]))
    assert store.live_tracks() == [0, 1]
    rows = store.rows()
    assert [roi_id for roi_id, _ in rows.rois] == [0, 1]
    assert [b.x for b in rows.boxes] == [0.0, 51.0]
    assert rows.boxes[1].heading == pytest.approx(0.5)
    # row 0 is the tracklet missed in the previous frame
    update_tracklets(store, MatchResult([(0, 0, 1.0)], [1], []), roi_set(0.2, [(1.0, 0.0, 0.0)]))
    assert len(store.tracklets[0]) == 2
    assert store.tracklets[1].missed == 1
