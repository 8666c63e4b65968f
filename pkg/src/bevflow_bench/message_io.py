"""
Wire format of collaboration messages and the observation log.

A message is

    header     sender_id u32, timestamp f64, roi_count u32
    ROIs       roi_count x (id u32, x y length width cos sin f64, confidence f64)
    cells      n x (h u32, w u32, D x f32)

all little-endian. A message log is a concatenation of messages, each
prefixed by its byte length as u32. The cell count follows from the record
length, so decoding needs the grid spec.
"""

import json
import logging
import math
from pathlib import Path

import numpy as np

from .boxes import OrientedBox
from .errors import MessageFormatError
from .roi_codec import BevGrid, CollabMessage, GridSpec, RoiSet
from .scene_sim import ObjectState, Observation

logger = logging.getLogger(__name__)

HEADER = np.dtype([("sender_id", "<u4"), ("timestamp", "<f8"), ("roi_count", "<u4")])
ROI = np.dtype([("id", "<u4"), ("box", "<f8", (6,)), ("confidence", "<f8")])
LENGTH = np.dtype("<u4")


def _cell_dtype(channels: int) -> np.dtype:
    return np.dtype([("h", "<u4"), ("w", "<u4"), ("features", "<f4", (channels,))])


def encode_message(msg: CollabMessage) -> bytes:
    header = np.zeros(1, dtype=HEADER)
    header["sender_id"] = msg.sender_id
    header["timestamp"] = msg.timestamp
    header["roi_count"] = len(msg.roi_set)

    rois = np.zeros(len(msg.roi_set), dtype=ROI)
    for i, (roi_id, box) in enumerate(msg.roi_set.rois):
        rois[i]["id"] = roi_id
        rois[i]["box"] = (
            box.x,
            box.y,
            box.length,
            box.width,
            math.cos(box.heading),
            math.sin(box.heading),
        )
        rois[i]["confidence"] = box.confidence

    grid = msg.sparse_grid
    rows, cols = np.nonzero(grid.nonzero_mask())
    cells = np.zeros(len(rows), dtype=_cell_dtype(grid.spec.D))
    cells["h"] = rows
    cells["w"] = cols
    cells["features"] = grid.data[rows, cols]
    return header.tobytes() + rois.tobytes() + cells.tobytes()


def decode_message(payload: bytes, spec: GridSpec) -> CollabMessage:
    """
    Inverse of :func:`encode_message`.

    Raises:
        MessageFormatError: If the payload is truncated, its cells do not fit
            the grid spec or one of its ROIs is not a valid box.
    """
    if len(payload) < HEADER.itemsize:
        raise MessageFormatError(f"Message of {len(payload)} bytes is shorter than its header.")
    header = np.frombuffer(payload, dtype=HEADER, count=1)[0]
    n_rois = int(header["roi_count"])
    offset = HEADER.itemsize
    end = offset + n_rois * ROI.itemsize
    if len(payload) < end:
        raise MessageFormatError(f"Message announces {n_rois} ROIs but is truncated.")
    rois = np.frombuffer(payload, dtype=ROI, count=n_rois, offset=offset)

    cell_dtype = _cell_dtype(spec.D)
    remaining = len(payload) - end
    if remaining % cell_dtype.itemsize:
        raise MessageFormatError(
            f"{remaining} trailing bytes are not a whole number of {spec.D}-channel cells."
        )
    cells = np.frombuffer(payload, dtype=cell_dtype, offset=end)
    if len(cells) and (cells["h"].max() >= spec.H or cells["w"].max() >= spec.W):
        raise MessageFormatError("Message cells lie outside the grid.")

    data = np.zeros(spec.shape, dtype=np.float32)
    data[cells["h"], cells["w"]] = cells["features"]
    try:
        roi_set = RoiSet(
            timestamp=float(header["timestamp"]),
            rois=[
                (
                    int(r["id"]),
                    OrientedBox(
                        x=float(r["box"][0]),
                        y=float(r["box"][1]),
                        length=float(r["box"][2]),
                        width=float(r["box"][3]),
                        heading=math.atan2(r["box"][5], r["box"][4]),
                        confidence=float(r["confidence"]),
                    ),
                )
                for r in rois
            ],
        )
    except ValueError as exc:
        logger.error("Sender %d: invalid ROI in message at %.3fs.", header["sender_id"], header["timestamp"])
        raise MessageFormatError(f"Message holds an invalid ROI: {exc}") from exc
    return CollabMessage(
        sender_id=int(header["sender_id"]),
        timestamp=float(header["timestamp"]),
        roi_set=roi_set,
        sparse_grid=BevGrid(spec=spec, data=data),
    )


def write_message_log(path: Path | str, messages: list[CollabMessage]) -> None:
    with Path(path).open("wb") as file:
        for msg in messages:
            payload = encode_message(msg)
            file.write(np.array([len(payload)], dtype=LENGTH).tobytes())
            file.write(payload)
    logger.info("Wrote %d messages to %s.", len(messages), path)


def read_message_log(path: Path | str, spec: GridSpec) -> list[CollabMessage]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Message log {path} does not exist.")
    raw = path.read_bytes()
    messages = []
    offset = 0
    while offset < len(raw):
        if offset + LENGTH.itemsize > len(raw):
            raise MessageFormatError(f"Truncated length prefix at byte {offset} of {path}.")
        size = int(np.frombuffer(raw, dtype=LENGTH, count=1, offset=offset)[0])
        offset += LENGTH.itemsize
        if offset + size > len(raw):
            raise MessageFormatError(f"Truncated message at byte {offset} of {path}.")
        messages.append(decode_message(raw[offset : offset + size], spec))
        offset += size
    return messages


def _observation_to_json(obs: Observation) -> dict:
    return {
        "agent_id": obs.agent_id,
        "timestamp": obs.timestamp,
        "objects": [
            [b.x, b.y, b.length, b.width, b.heading, b.confidence] for b in obs.objects
        ],
        "ground_truth": [
            [s.id, s.x, s.y, s.heading, s.speed, s.yaw_rate, s.length, s.width]
            for s in obs.ground_truth
        ],
    }


def _observation_from_json(record: dict) -> Observation:
    return Observation(
        agent_id=int(record["agent_id"]),
        timestamp=float(record["timestamp"]),
        objects=[
            OrientedBox(x=x, y=y, length=l, width=w, heading=h, confidence=c)
            for x, y, l, w, h, c in record["objects"]
        ],
        ground_truth=[
            ObjectState(
                id=int(i), x=x, y=y, heading=h, speed=v, yaw_rate=yr, length=l, width=w
            )
            for i, x, y, h, v, yr, l, w in record["ground_truth"]
        ],
    )


def write_observation_log(
    path: Path | str, observations: list[Observation], grid_seeds: list[int] | None = None
) -> None:
    """
    Writes one JSON object per line. With grid_seeds, every line also records
    the seed the observation's feature grid was rendered with.
    """
    if grid_seeds is not None and len(grid_seeds) != len(observations):
        raise ValueError(f"Got {len(grid_seeds)} grid seeds for {len(observations)} observations.")
    with Path(path).open("w") as file:
        for i, obs in enumerate(observations):
            record = _observation_to_json(obs)
            if grid_seeds is not None:
                record["grid_seed"] = int(grid_seeds[i])
            file.write(json.dumps(record) + "\n")


def read_ego_log(path: Path | str) -> list[tuple[Observation, int | None]]:
    """
    Every observation of the log with its grid seed, None where none was recorded.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Observation log {path} does not exist.")
    with path.open("r") as file:
        records = [json.loads(line) for line in file if line.strip()]
    return [(_observation_from_json(r), r.get("grid_seed")) for r in records]


def read_observation_log(path: Path | str) -> list[Observation]:
    return [obs for obs, _ in read_ego_log(path)]
