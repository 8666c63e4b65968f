"""
Attention-based motion estimator for irregularly sampled tracklets.

Each tracklet is re-expressed relative to its last observation: positions in
the frame of the last heading, times relative to the last timestamp. Every
state becomes a token MLP(state) + u(t) and the query is u(t_query). One
multi-head attention layer attends from the query over the tokens, and a small
head reads the attended vector together with the query code and predicts the
(forward, lateral, yaw) displacement from the last state. The tokens carry no
velocity, so how far the object moves by the query time is only known through
the time codes. A query at the last timestamp returns the last state exactly.

u(t) is the trigonometric time encoding
    u(t)[2e] = sin(t / 10000^(2e/d)),  u(t)[2e+1] = cos(t / 10000^(2e/d))
with t in a configurable unit (deciseconds by default).
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .boxes import wrap_angle
from .config import EstimatorConfig
from .errors import EstimatorDivergedError, MessageFormatError
from .scene_sim import AgentClock, ObjectState, sample_speed, step_world

logger = logging.getLogger(__name__)

DTYPE = torch.float64
N_FEATURES = 4
PARAMS_MAGIC = b"BVFP"
PARAMS_VERSION = 2
PARAMS_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("d", "<u4"),
        ("n_heads", "<u4"),
        ("hidden", "<u4"),
        ("time_encoding", "<u4"),
        ("time_unit", "<f8"),
        ("position_scale", "<f8"),
    ]
)


def time_encode_torch(t: torch.Tensor, d: int) -> torch.Tensor:
    """
    Time encoding of a tensor of times (already in encoding units), adding a
    trailing dimension of size d.
    """
    e = torch.arange(d // 2, dtype=t.dtype)
    freq = torch.pow(torch.tensor(10000.0, dtype=t.dtype), -2.0 * e / d)
    angle = t.unsqueeze(-1) * freq
    return torch.stack((torch.sin(angle), torch.cos(angle)), dim=-1).flatten(-2)


class MotionEstimator(nn.Module):
    def __init__(
        self,
        d: int = 16,
        n_heads: int = 4,
        hidden: int = 32,
        time_unit: float = 0.1,
        time_encoding: bool = True,
        position_scale: float = 10.0,
    ):
        super().__init__()
        if d < 2 or d % 2:
            raise ValueError(f"d must be a positive even number, got {d}.")
        if d % n_heads:
            raise ValueError(f"d ({d}) must be divisible by n_heads ({n_heads}).")
        self.d = d
        self.n_heads = n_heads
        self.hidden = hidden
        self.time_unit = time_unit
        self.time_encoding = time_encoding
        self.position_scale = position_scale
        self.token_mlp = nn.Sequential(
            nn.Linear(N_FEATURES, hidden), nn.Tanh(), nn.Linear(hidden, d)
        )
        self.attention = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.head = nn.Sequential(nn.Linear(d, hidden), nn.Tanh(), nn.Linear(hidden, 3))
        # start from the zero-motion prior
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)
        self.to(DTYPE)

    @classmethod
    def from_config(cls, config: EstimatorConfig) -> "MotionEstimator":
        return cls(
            d=config.d,
            n_heads=config.n_heads,
            hidden=config.hidden,
            time_unit=config.time_unit,
            time_encoding=config.time_encoding,
            position_scale=config.position_scale,
        )

    def encode_time(self, t: torch.Tensor) -> torch.Tensor:
        codes = time_encode_torch(t, self.d)
        if not self.time_encoding:
            return torch.zeros_like(codes)
        return codes

    def forward(self, batch: "Batch") -> torch.Tensor:
        """
        Predicted (x, y, heading) at the query times, shape (B, 3).
        """
        tokens = self.token_mlp(batch.features) + self.encode_time(batch.token_times)
        query = self.encode_time(batch.query_times).unsqueeze(1)
        attended, _ = self.attention(
            query, tokens, tokens, key_padding_mask=batch.padding, need_weights=False
        )
        step = self.head((attended + query).squeeze(1))
        # no displacement at zero elapsed time
        moving = (batch.elapsed > 0).to(step.dtype)
        forward = moving * step[:, 0] * self.position_scale
        lateral = moving * step[:, 1] * self.position_scale
        c, s = torch.cos(batch.last[:, 2]), torch.sin(batch.last[:, 2])
        x = batch.last[:, 0] + c * forward - s * lateral
        y = batch.last[:, 1] + s * forward + c * lateral
        heading = batch.last[:, 2] + moving * step[:, 2]
        return torch.stack((x, y, heading), dim=1)


@dataclass
class Batch:
    features: torch.Tensor  # (B, L, N_FEATURES)
    token_times: torch.Tensor  # (B, L), encoding units
    query_times: torch.Tensor  # (B,), encoding units
    padding: torch.Tensor  # (B, L), True where there is no token
    elapsed: torch.Tensor  # (B,), seconds from the last state to the query
    last: torch.Tensor  # (B, 3) last (x, y, heading)
    targets: torch.Tensor | None = None  # (B, 3)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, index: torch.Tensor) -> "Batch":
        return Batch(
            features=self.features[index],
            token_times=self.token_times[index],
            query_times=self.query_times[index],
            padding=self.padding[index],
            elapsed=self.elapsed[index],
            last=self.last[index],
            targets=None if self.targets is None else self.targets[index],
        )


def relative_features(states: np.ndarray, position_scale: float = 10.0) -> np.ndarray:
    """
    Per-state features relative to the last state of a (L, 4) array of
    (t, x, y, heading): position in the last heading frame and cos/sin of the
    heading change. Timestamps are left to the time encoding.
    """
    _, x_n, y_n, a_n = states[-1]
    c, s = math.cos(a_n), math.sin(a_n)
    dx, dy = states[:, 1] - x_n, states[:, 2] - y_n
    fx = c * dx + s * dy
    fy = -s * dx + c * dy
    da = wrap_angle(states[:, 3] - a_n)
    return np.column_stack([fx / position_scale, fy / position_scale, np.cos(da), np.sin(da)])


def collate(
    histories: list[np.ndarray],
    t_queries: list[float],
    model: MotionEstimator,
    targets: list[np.ndarray] | None = None,
) -> Batch:
    """
    Pads a list of (L_i, 4) state arrays into one batch.
    """
    n = len(histories)
    length = max(len(h) for h in histories)
    features = np.zeros((n, length, N_FEATURES))
    token_times = np.zeros((n, length))
    padding = np.ones((n, length), dtype=bool)
    query_times = np.zeros(n)
    elapsed = np.zeros(n)
    last = np.zeros((n, 3))
    for i, (states, t_q) in enumerate(zip(histories, t_queries)):
        m = len(states)
        features[i, :m] = relative_features(states, model.position_scale)
        token_times[i, :m] = (states[:, 0] - states[-1, 0]) / model.time_unit
        padding[i, :m] = False
        elapsed[i] = t_q - states[-1, 0]
        query_times[i] = elapsed[i] / model.time_unit
        last[i] = states[-1, 1:]
    return Batch(
        features=torch.from_numpy(features),
        token_times=torch.from_numpy(token_times),
        query_times=torch.from_numpy(query_times),
        padding=torch.from_numpy(padding),
        elapsed=torch.from_numpy(elapsed),
        last=torch.from_numpy(last),
        targets=None if targets is None else torch.from_numpy(np.asarray(targets, dtype=float)),
    )


def predict(model: MotionEstimator, histories: list[np.ndarray], t_queries: list[float]) -> np.ndarray:
    """
    (x, y, heading) at each query time, heading wrapped, shape (B, 3).
    """
    if not histories:
        return np.zeros((0, 3))
    with torch.no_grad():
        out = model(collate(histories, t_queries, model)).numpy().copy()
    out[:, 2] = wrap_angle(out[:, 2])
    return out


def mha_forward(query: np.ndarray, tokens: list[tuple[np.ndarray, np.ndarray]], params: MotionEstimator) -> np.ndarray:
    """
    One scaled dot-product multi-head attention step: keys and values are the
    token features plus their time codes, the query is a time code.

    Args:
        query: The query time code, shape (d,).
        tokens: (feature, time code) pairs, each of shape (d,).
        params: The estimator whose attention weights are used.

    Returns:
        np.ndarray: The attended d-vector.
    """
    if not tokens:
        logger.error("mha_forward needs at least one token.")
        raise ValueError("mha_forward needs at least one token.")
    q = torch.as_tensor(np.asarray(query), dtype=DTYPE).reshape(1, 1, -1)
    kv = torch.stack(
        [torch.as_tensor(np.asarray(f) + np.asarray(c), dtype=DTYPE) for f, c in tokens]
    ).unsqueeze(0)
    if q.shape[-1] != params.d or kv.shape[-1] != params.d:
        raise ValueError(f"Query and tokens must have dimension {params.d}.")
    with torch.no_grad():
        out, _ = params.attention(q, kv, kv, need_weights=False)
    return out[0, 0].numpy().copy()


def loss_fn(model: MotionEstimator, batch: Batch, angle_weight: float = 1.0) -> torch.Tensor:
    """
    Mean squared error over (dx, dy, w * wrapped dheading), positions in units
    of the model's position scale.
    """
    pred = model(batch)
    ex = (pred[:, 0] - batch.targets[:, 0]) / model.position_scale
    ey = (pred[:, 1] - batch.targets[:, 1]) / model.position_scale
    diff = pred[:, 2] - batch.targets[:, 2]
    ea = angle_weight * torch.atan2(torch.sin(diff), torch.cos(diff))
    return torch.mean(torch.stack((ex, ey, ea)) ** 2)


@dataclass
class TrainingSample:
    states: np.ndarray  # (L, 4) observed (t, x, y, heading)
    t_query: float
    target: np.ndarray  # true (x, y, heading) at t_query


@dataclass
class TrainingResult:
    model: MotionEstimator
    initial_loss: float
    final_loss: float
    history: list[float] = field(default_factory=list)


def make_training_set(
    n: int,
    seed: int,
    k: int = 3,
    intervals: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5),
    nominal_period: float = 0.1,
    turbulence_bound: float = 0.01,
    speed_mean_kmh: float = 25.0,
    speed_cap_kmh: float = 105.0,
    yaw_rate_std: float = 0.1,
    center_sigma: float = 0.1,
    heading_sigma: float = math.radians(1.0),
    static: bool = False,
    speed: float | None = None,
    yaw_rate: float | None = None,
    query_offset: float | None = None,
) -> list[TrainingSample]:
    """
    Simulated tracklets with irregular gaps and the true pose at a later query
    time, drawn the way collaborator messages are drawn in the benchmark.

    speed (m/s), yaw_rate (rad/s) and query_offset (s after the last state)
    pin the respective draw to a fixed value.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        clock = AgentClock(
            agent_id=0,
            turbulence_bound=turbulence_bound,
            nominal_period=nominal_period,
            interval_expectation=float(rng.choice(intervals)),
        )
        p = clock.binomial_p()
        length = int(rng.integers(2, k + 1)) if k >= 2 else 1
        gaps = nominal_period * (1 + rng.binomial(clock.binomial_n, p, size=length)) + rng.uniform(
            -turbulence_bound, turbulence_bound, size=length
        )
        times = np.concatenate(([0.0], np.cumsum(gaps[:-1])))
        t_query = times[-1] + (rng.uniform() * gaps[-1] if query_offset is None else query_offset)
        if static:
            v = 0.0
        elif speed is None:
            v = float(sample_speed(rng, speed_mean_kmh, speed_cap_kmh, 1)[0])
        else:
            v = speed
        obj = ObjectState(
            id=0,
            x=0.0,
            y=0.0,
            heading=float(rng.uniform(-math.pi, math.pi)),
            speed=v,
            yaw_rate=0.0 if static else (float(rng.normal(0.0, yaw_rate_std)) if yaw_rate is None else yaw_rate),
            length=4.5,
            width=1.9,
        )
        truth = [step_world([obj], t)[0] for t in times]
        states = np.array(
            [
                [
                    t,
                    s.x + rng.normal(0.0, center_sigma),
                    s.y + rng.normal(0.0, center_sigma),
                    wrap_angle(s.heading + rng.normal(0.0, heading_sigma)),
                ]
                for t, s in zip(times, truth)
            ]
        )
        target_state = step_world([obj], t_query)[0]
        samples.append(
            TrainingSample(
                states=states,
                t_query=float(t_query),
                target=np.array([target_state.x, target_state.y, target_state.heading]),
            )
        )
    return samples


def samples_to_batch(samples: list[TrainingSample], model: MotionEstimator) -> Batch:
    return collate(
        [s.states for s in samples],
        [s.t_query for s in samples],
        model,
        targets=[s.target for s in samples],
    )


def train_estimator(
    samples: list[TrainingSample],
    config: EstimatorConfig,
    seed: int = 0,
) -> TrainingResult:
    """
    Fits the estimator by minimizing the MSE between predicted and true poses
    with Adam at a fixed step size over a fixed number of epochs.

    Args:
        samples: The training set.
        config: Architecture and optimization hyperparameters.
        seed: Seed of the weight initialization and batch shuffling.

    Returns:
        TrainingResult: The trained model with its initial and final training loss.

    Raises:
        ValueError: If the training set is empty.
        EstimatorDivergedError: If the loss becomes non-finite.
    """
    if not samples:
        logger.error("Cannot train the estimator on an empty training set.")
        raise ValueError("The training set is empty.")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = MotionEstimator.from_config(config)
    batch = samples_to_batch(samples, model)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    with torch.no_grad():
        initial = float(loss_fn(model, batch, config.angle_weight))
    logger.info(
        "Training estimator on %d samples for %d epochs (initial loss %.6f).",
        len(samples),
        config.epochs,
        initial,
    )
    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(len(batch), generator=generator)
        for start in range(0, len(batch), config.batch_size):
            loss = loss_fn(model, batch.subset(order[start : start + config.batch_size]), config.angle_weight)
            if not torch.isfinite(loss):
                logger.error("Training loss became %s in epoch %d.", loss.item(), epoch)
                raise EstimatorDivergedError(f"Training loss became {loss.item()} in epoch {epoch}.")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        history.append(loss.item())
        if (epoch + 1) % 50 == 0:
            logger.debug("Epoch %d: batch loss %.6f", epoch + 1, history[-1])

    with torch.no_grad():
        final = float(loss_fn(model, batch, config.angle_weight))
    if not math.isfinite(final):
        raise EstimatorDivergedError(f"Final training loss is {final}.")
    logger.info("Estimator trained: loss %.6f -> %.6f.", initial, final)
    model.eval()
    return TrainingResult(model=model, initial_loss=initial, final_loss=final, history=history)


def evaluate_loss(model: MotionEstimator, samples: list[TrainingSample], angle_weight: float = 1.0) -> float:
    with torch.no_grad():
        return float(loss_fn(model, samples_to_batch(samples, model), angle_weight))


def save_params(model: MotionEstimator, path: Path | str) -> None:
    """
    Writes the header followed by every parameter as little-endian f64, in
    state_dict order.
    """
    raw = params_to_bytes(model)
    Path(path).write_bytes(raw)
    logger.info("Saved estimator params (%d bytes) to %s.", len(raw), path)


def params_from_bytes(raw: bytes) -> MotionEstimator:
    if len(raw) < PARAMS_HEADER.itemsize:
        raise MessageFormatError("Params file is shorter than its header.")
    header = np.frombuffer(raw, dtype=PARAMS_HEADER, count=1)[0]
    if header["magic"] != PARAMS_MAGIC:
        raise MessageFormatError(f"Bad params magic {header['magic']!r}.")
    if header["version"] != PARAMS_VERSION:
        raise MessageFormatError(f"Unsupported params version {header['version']}.")
    model = MotionEstimator(
        d=int(header["d"]),
        n_heads=int(header["n_heads"]),
        hidden=int(header["hidden"]),
        time_unit=float(header["time_unit"]),
        time_encoding=bool(header["time_encoding"]),
        position_scale=float(header["position_scale"]),
    )
    flat = np.frombuffer(raw, dtype="<f8", offset=PARAMS_HEADER.itemsize)
    state = model.state_dict()
    expected = sum(t.numel() for t in state.values())
    if flat.size != expected:
        raise MessageFormatError(f"Params file holds {flat.size} values, expected {expected}.")
    offset = 0
    for name, tensor in state.items():
        n = tensor.numel()
        state[name] = torch.from_numpy(flat[offset : offset + n].copy()).reshape(tensor.shape)
        offset += n
    model.load_state_dict(state)
    model.eval()
    return model


def params_to_bytes(model: MotionEstimator) -> bytes:
    header = np.zeros(1, dtype=PARAMS_HEADER)
    for key, value in (
        ("magic", PARAMS_MAGIC),
        ("version", PARAMS_VERSION),
        ("d", model.d),
        ("n_heads", model.n_heads),
        ("hidden", model.hidden),
        ("time_encoding", int(model.time_encoding)),
        ("time_unit", model.time_unit),
        ("position_scale", model.position_scale),
    ):
        header[key] = value
    flat = np.concatenate([t.detach().numpy().ravel() for t in model.state_dict().values()])
    return header.tobytes() + flat.astype("<f8").tobytes()


def load_params(path: Path | str) -> MotionEstimator:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Params file {path} does not exist.")
    return params_from_bytes(path.read_bytes())
