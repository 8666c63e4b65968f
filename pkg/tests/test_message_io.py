import numpy as np
import pytest

from bevflow_bench.boxes import OrientedBox
from bevflow_bench.errors import MessageFormatError
from bevflow_bench.message_io import (
    HEADER,
    ROI,
    decode_message,
    encode_message,
    read_ego_log,
    read_message_log,
    read_observation_log,
    write_message_log,
    write_observation_log,
)
from bevflow_bench.roi_codec import BevGrid, CollabMessage, RoiSet, make_message
from bevflow_bench.scene_sim import ObjectState, Observation


@pytest.fixture
def obs():
    truth = ObjectState(id=4, x=3.0, y=-2.0, heading=2.5, speed=6.0, yaw_rate=0.1, length=4.4, width=1.8)
    return Observation(
        agent_id=2,
        timestamp=1.25,
        objects=[
            OrientedBox(x=3.05, y=-2.02, length=4.4, width=1.8, heading=2.51, confidence=0.85),
            OrientedBox(x=-7.0, y=5.0, length=4.0, width=2.0, heading=-1.0, confidence=0.7),
        ],
        ground_truth=[truth],
    )


def test_message_survives_the_wire(obs, small_spec):
    msg = make_message(obs, small_spec, rng_seed=3)
    decoded = decode_message(encode_message(msg), small_spec)
    assert decoded.sender_id == 2
    assert decoded.timestamp == 1.25
    assert np.array_equal(decoded.sparse_grid.data, msg.sparse_grid.data)
    assert [roi_id for roi_id, _ in decoded.roi_set.rois] == [roi_id for roi_id, _ in msg.roi_set.rois]
    for (_, a), (_, b) in zip(decoded.roi_set.rois, msg.roi_set.rois):
        assert (a.x, a.y, a.length, a.width, a.confidence) == (b.x, b.y, b.length, b.width, b.confidence)
        assert a.heading == pytest.approx(b.heading, abs=1e-12)


def test_message_log(obs, small_spec, tmp_path):
    messages = [make_message(obs, small_spec, rng_seed=s) for s in range(3)]
    path = tmp_path / "messages.bin"
    write_message_log(path, messages)
    loaded = read_message_log(path, small_spec)
    assert len(loaded) == 3
    for a, b in zip(loaded, messages):
        assert np.array_equal(a.sparse_grid.data, b.sparse_grid.data)


def test_truncated_message_is_rejected(obs, small_spec, tmp_path):
    payload = encode_message(make_message(obs, small_spec, rng_seed=0))
    with pytest.raises(MessageFormatError):
        decode_message(payload[:10], small_spec)
    with pytest.raises(MessageFormatError):
        decode_message(payload[:-3], small_spec)

    path = tmp_path / "messages.bin"
    write_message_log(path, [make_message(obs, small_spec, rng_seed=0)])
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(MessageFormatError):
        read_message_log(path, small_spec)


@pytest.mark.parametrize("length", [0.0, -4.0, float("nan")])
def test_message_with_a_broken_box_is_rejected(obs, small_spec, length):
    msg = CollabMessage(
        sender_id=2,
        timestamp=1.25,
        roi_set=RoiSet(timestamp=1.25, rois=list(enumerate(obs.objects))),
        sparse_grid=BevGrid(spec=small_spec, data=np.zeros(small_spec.shape, dtype=np.float32)),
    )
    raw = bytearray(encode_message(msg))
    rois = np.frombuffer(raw, dtype=ROI, count=2, offset=HEADER.itemsize)
    assert rois["box"][1, 2] == 4.0
    rois["box"][1, 2] = length
    with pytest.raises(MessageFormatError):
        decode_message(bytes(raw), small_spec)


def test_missing_log(small_spec, tmp_path):
    with pytest.raises(FileNotFoundError):
        read_message_log(tmp_path / "nope.bin", small_spec)
    with pytest.raises(FileNotFoundError):
        read_observation_log(tmp_path / "nope.jsonl")


def test_observation_log(obs, tmp_path):
    path = tmp_path / "ego.jsonl"
    write_observation_log(path, [obs, obs])
    assert read_observation_log(path) == [obs, obs]


def test_ego_log_keeps_grid_seeds(obs, tmp_path):
    path = tmp_path / "ego.jsonl"
    write_observation_log(path, [obs, obs], grid_seeds=[7, 2**32 - 1])
    assert read_ego_log(path) == [(obs, 7), (obs, 2**32 - 1)]
    assert read_observation_log(path) == [obs, obs]
    write_observation_log(path, [obs])
    assert read_ego_log(path) == [(obs, None)]
    with pytest.raises(ValueError):
        write_observation_log(path, [obs], grid_seeds=[1, 2])
