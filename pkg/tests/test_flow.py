import math

import numpy as np
import pytest
import torch

from bevflow_bench.boxes import OrientedBox
from bevflow_bench.config import EstimatorConfig
from bevflow_bench.estimator import MotionEstimator, make_training_set, predict, time_encode_torch, train_estimator
from bevflow_bench.flow import (
    PosePrediction,
    build_flow_map,
    estimate_pose,
    estimate_pose_cv,
    predict_store,
    time_encode,
    zero_motion,
)
from bevflow_bench.roi_codec import RoiSet
from bevflow_bench.tracker import make_tracklet, track_frames


def source(x=0.2, y=0.2, heading=0.0, conf=0.9) -> OrientedBox:
    return OrientedBox(x=x, y=y, length=4.0, width=2.0, heading=heading, confidence=conf)


def prediction(src: OrientedBox, x: float, y: float, heading: float, track_id: int = 0) -> PosePrediction:
    return PosePrediction(track_id=track_id, x=x, y=y, heading=heading, source=src)


def test_time_encode_examples():
    assert time_encode(0.0, 4) == pytest.approx([0.0, 1.0, 0.0, 1.0])
    assert time_encode(0.1, 4) == pytest.approx([math.sin(1.0), math.cos(1.0), math.sin(0.01), math.cos(0.01)])
    assert time_encode(1.0, 2, unit=1.0) == pytest.approx([math.sin(1.0), math.cos(1.0)])


def test_time_encode_pairs_are_unit_vectors():
    for t in np.linspace(0.0, 3.0, 31):
        code = time_encode(float(t), 16).reshape(-1, 2)
        assert np.linalg.norm(code, axis=1) == pytest.approx(np.ones(8))


def test_time_encode_rejects_odd_dimension():
    with pytest.raises(ValueError):
        time_encode(0.0, 5)
    with pytest.raises(ValueError):
        time_encode(0.0, 0)


def test_torch_time_encoding_agrees():
    times = torch.tensor([0.0, 1.7, 4.2], dtype=torch.float64)
    codes = time_encode_torch(times, 8).numpy()
    for t, code in zip(times.tolist(), codes):
        assert code == pytest.approx(time_encode(t, 8, unit=1.0), abs=1e-12)


def test_cv_extrapolates_a_line():
    tracklet = make_tracklet(0, [(0.0, 0.0, 0.0, 0.0), (1.0, 2.0, 0.0, 0.0)])
    pred = estimate_pose_cv(tracklet, 2.0)
    assert (pred.x, pred.y, pred.heading) == pytest.approx((4.0, 0.0, 0.0))
    assert not pred.fallback


def test_cv_keeps_stationary_objects():
    tracklet = make_tracklet(0, [(0.0, 5.0, 5.0, 0.3), (1.0, 5.0, 5.0, 0.3)])
    pred = estimate_pose_cv(tracklet, 2.0)
    assert (pred.x, pred.y, pred.heading) == pytest.approx((5.0, 5.0, 0.3))


def test_cv_recovers_constant_velocity_from_irregular_samples():
    times = [0.0, 0.13, 0.31, 0.4, 0.62]
    tracklet = make_tracklet(0, [(t, 1.0 + 3.0 * t, -2.0 + 0.5 * t, 0.1) for t in times], k=5)
    pred = estimate_pose_cv(tracklet, 0.9)
    assert pred.x == pytest.approx(1.0 + 3.0 * 0.9, abs=1e-9)
    assert pred.y == pytest.approx(-2.0 + 0.5 * 0.9, abs=1e-9)


def test_cv_advances_heading():
    tracklet = make_tracklet(0, [(0.0, 0.0, 0.0, 3.1), (1.0, 0.0, 0.0, -3.1)])
    pred = estimate_pose_cv(tracklet, 2.0)
    assert pred.heading == pytest.approx(-3.1 + (2 * math.pi - 6.2))


def test_cv_at_last_timestamp_is_exact():
    tracklet = make_tracklet(0, [(0.0, 0.1, 0.2, 0.3), (0.37, 1.3, 0.7, 0.35)])
    pred = estimate_pose_cv(tracklet, 0.37)
    assert (pred.x, pred.y, pred.heading) == (1.3, 0.7, 0.35)
    assert not pred.fallback


def test_single_state_falls_back_to_zero_motion():
    tracklet = make_tracklet(3, [(0.5, 1.0, 2.0, 0.4)])
    for pred in (estimate_pose_cv(tracklet, 1.0, roi_id=7), estimate_pose(tracklet, 1.0, MotionEstimator())):
        assert (pred.x, pred.y, pred.heading) == (1.0, 2.0, 0.4)
        assert pred.fallback
        assert pred.track_id == 3
    assert zero_motion(tracklet, roi_id=7).roi_id == 7


def test_query_before_last_state_is_rejected():
    tracklet = make_tracklet(0, [(0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 0.0, 0.0)])
    with pytest.raises(ValueError):
        estimate_pose_cv(tracklet, 0.5)
    with pytest.raises(ValueError):
        estimate_pose(tracklet, 0.5, MotionEstimator())


def test_untrained_estimator_predicts_zero_motion():
    tracklet = make_tracklet(0, [(0.0, 0.0, 0.0, 0.2), (0.3, 2.0, 0.5, 0.25)])
    pred = estimate_pose(tracklet, 0.8, MotionEstimator())
    assert (pred.x, pred.y, pred.heading) == (2.0, 0.5, 0.25)
    assert not pred.fallback


def test_zero_motion_gives_a_zero_flow_map(small_spec):
    src = source()
    flow = build_flow_map([prediction(src, src.x, src.y, src.heading)], small_spec)
    assert flow.is_zero()


def test_translation_flow(small_spec):
    src = source()
    flow = build_flow_map([prediction(src, 1.0, 0.2, 0.0)], small_spec)
    rows, cols = small_spec.footprint(src)
    inside = np.zeros((small_spec.H, small_spec.W), dtype=bool)
    inside[rows, cols] = True
    assert flow.vectors[inside] == pytest.approx(np.tile([0.0, 2.0], (inside.sum(), 1)))
    assert not flow.vectors[~inside].any()
    assert not flow.rotation.any()


def test_rotation_flow(small_spec):
    src = source()
    flow = build_flow_map([prediction(src, 0.2, 0.2, math.pi / 2)], small_spec)
    rows, cols = small_spec.footprint(src)
    rx = small_spec.col_centers()[cols] - 0.2
    ry = small_spec.row_centers()[rows] - 0.2
    # a quarter turn maps (rx, ry) to (-ry, rx)
    assert flow.vectors[rows, cols, 1] == pytest.approx((-ry - rx) / small_spec.cell, abs=1e-9)
    assert flow.vectors[rows, cols, 0] == pytest.approx((rx - ry) / small_spec.cell, abs=1e-9)
    assert flow.rotation[rows, cols] == pytest.approx(np.full(len(rows), math.pi / 2))


def test_overlapping_sources_take_the_most_confident_motion(small_spec):
    strong, weak = source(x=0.2, conf=0.9), source(x=1.0, conf=0.7)
    flow = build_flow_map(
        [prediction(weak, 1.0, 2.2, 0.0, track_id=0), prediction(strong, 1.2, 0.2, 0.0, track_id=1)], small_spec
    )
    rows, cols = small_spec.footprint(strong)
    assert flow.vectors[rows, cols] == pytest.approx(np.tile([0.0, 2.5], (len(rows), 1)))

    tied = source(x=1.0, conf=0.9)
    flow = build_flow_map(
        [prediction(strong, 1.2, 0.2, 0.0, track_id=5), prediction(tied, 1.0, 2.2, 0.0, track_id=2)], small_spec
    )
    rows, cols = small_spec.footprint(tied)
    assert flow.vectors[rows, cols] == pytest.approx(np.tile([5.0, 0.0], (len(rows), 1)))


def test_predict_store(small_spec):
    frames = [
        RoiSet(timestamp=t, rois=[(0, source(x=0.2 + 2.0 * t)), (1, source(x=-8.0, conf=0.8))])
        for t in (0.0, 0.1, 0.2)
    ]
    store = track_frames(frames, sender_id=1)
    assert build_flow_map(predict_store(store, 0.5, "identity"), small_spec).is_zero()

    cv = predict_store(store, 0.5, "cv")
    assert [p.roi_id for p in cv] == [0, 1]
    assert cv[0].x == pytest.approx(1.2)
    assert cv[1].x == pytest.approx(-8.0)

    mha = predict_store(store, 0.5, "mha", MotionEstimator())
    assert [(p.x, p.y) for p in mha] == [(t.last[1], t.last[2]) for _, t in store.current()]

    with pytest.raises(ValueError):
        predict_store(store, 0.5, "mha")
    with pytest.raises(ValueError):
        predict_store(store, 0.5, "kalman")


def test_trained_attention_beats_constant_velocity_on_turns():
    turning = dict(speed=10.0, yaw_rate=0.3, query_offset=0.3, center_sigma=0.0, heading_sigma=0.0)
    model = train_estimator(make_training_set(512, seed=0, **turning), EstimatorConfig(epochs=100), seed=0).model
    test_set = make_training_set(500, seed=1, **turning)
    predicted = predict(model, [s.states for s in test_set], [s.t_query for s in test_set])
    mha_error = np.mean([np.hypot(*(p[:2] - s.target[:2])) for p, s in zip(predicted, test_set)])
    cv = [estimate_pose_cv(make_tracklet(0, [tuple(row) for row in s.states]), s.t_query) for s in test_set]
    cv_error = np.mean([math.hypot(p.x - s.target[0], p.y - s.target[1]) for p, s in zip(cv, test_set)])
    assert mha_error < cv_error
