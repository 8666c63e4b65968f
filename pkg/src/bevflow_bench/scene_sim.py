"""
Deterministic synthetic worlds of moving vehicles, observed by agents whose
clocks tick irregularly.

Every function here is pure: randomness only enters through explicit seeds,
so any call can be repeated (or run on another worker) with identical results.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .boxes import OrientedBox, wrap_angle

logger = logging.getLogger(__name__)

KMH = 1.0 / 3.6
_STRAIGHT_YAW_RATE = 1e-12


def derive_seed(*keys: int) -> int:
    """
    Derives a 32-bit seed from a tuple of integer keys, e.g.
    (scene seed, agent id, frame index).
    """
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class ObjectState:
    """
    Kinematic state of one vehicle under the constant-turn-rate model.
    """

    id: int
    x: float
    y: float
    heading: float
    speed: float
    yaw_rate: float
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError(
                f"Object {self.id} needs a positive size, got ({self.length}, {self.width})."
            )
        if self.speed < 0:
            raise ValueError(f"Object {self.id} has negative speed {self.speed}.")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def center(self) -> tuple[float, float]:
        return self.x, self.y

    @property
    def size(self) -> tuple[float, float]:
        return self.length, self.width

    def as_box(self, confidence: float = 1.0) -> OrientedBox:
        return OrientedBox(
            x=self.x,
            y=self.y,
            length=self.length,
            width=self.width,
            heading=self.heading,
            confidence=confidence,
        )


def _advance(state: ObjectState, dt: float) -> ObjectState:
    if dt == 0.0:
        return state
    v, w, th = state.speed, state.yaw_rate, state.heading
    if abs(w) < _STRAIGHT_YAW_RATE:
        x = state.x + v * math.cos(th) * dt
        y = state.y + v * math.sin(th) * dt
    else:
        x = state.x + v / w * (math.sin(th + w * dt) - math.sin(th))
        y = state.y + v / w * (math.cos(th) - math.cos(th + w * dt))
    return replace(state, x=x, y=y, heading=wrap_angle(th + w * dt))


def step_world(objects: list[ObjectState], dt: float) -> list[ObjectState]:
    """
    Advances every object by dt seconds with the closed-form constant speed,
    constant yaw rate solution.

    Args:
        objects: The current object states.
        dt: Elapsed time in seconds, must be non-negative.

    Returns:
        list[ObjectState]: The new states, in the same order and with the same ids.
    """
    if dt < 0:
        logger.error("Cannot step the world backwards (dt=%s).", dt)
        raise ValueError(f"dt must be non-negative, got {dt}.")
    return [_advance(obj, dt) for obj in objects]


@dataclass(frozen=True)
class AgentClock:
    """
    Clock of one agent: a start offset, per-timestamp turbulence and the
    expected interval between consecutive messages.
    """

    agent_id: int
    offset: float = 0.0
    turbulence_bound: float = 0.0
    nominal_period: float = 0.1
    interval_expectation: float = 0.1
    binomial_n: int = 10

    def __post_init__(self):
        if self.nominal_period <= 0:
            raise ValueError(f"nominal_period must be positive, got {self.nominal_period}.")
        if not 0 <= self.turbulence_bound < self.nominal_period:
            raise ValueError(
                f"turbulence_bound must lie in [0, nominal_period), got {self.turbulence_bound}."
            )
        if self.binomial_n < 1:
            raise ValueError(f"binomial_n must be at least 1, got {self.binomial_n}.")

    def binomial_p(self) -> float:
        """
        Success probability that makes E[gap] = interval_expectation, since
        E[gap] = nominal_period * (1 + n * p).
        """
        if self.interval_expectation < self.nominal_period:
            logger.error(
                "Interval expectation %s is below the nominal period %s.",
                self.interval_expectation,
                self.nominal_period,
            )
            raise ValueError(
                f"interval_expectation ({self.interval_expectation}) must be at least "
                f"nominal_period ({self.nominal_period})."
            )
        p = (self.interval_expectation / self.nominal_period - 1.0) / self.binomial_n
        if p > 1.0:
            raise ValueError(
                f"interval_expectation ({self.interval_expectation}) exceeds the largest "
                f"reachable mean {self.nominal_period * (1 + self.binomial_n)}."
            )
        return p


@dataclass(frozen=True)
class Schedule:
    agent_id: int
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def latest_index(self, t: float) -> int:
        """
        Index of the latest timestamp <= t, or -1 if there is none.
        """
        return int(np.searchsorted(self.timestamps, t, side="right")) - 1


def sample_schedule(clock: AgentClock, horizon: float, rng_seed: int) -> Schedule:
    """
    Samples an irregular message schedule.

    The first timestamp is the clock offset; every following gap is
    nominal_period * (1 + B) + u with B ~ Binomial(n, p) and
    u ~ U(-turbulence_bound, turbulence_bound), drawn independently per gap.
    Timestamps at or beyond the horizon are cut off.

    Args:
        clock: The agent clock.
        horizon: End of the simulated period in seconds.
        rng_seed: Seed for the gap draws.

    Returns:
        Schedule: Strictly increasing timestamps.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}.")
    p = clock.binomial_p()
    rng = np.random.default_rng(rng_seed)
    min_gap = clock.nominal_period - clock.turbulence_bound
    n_gaps = int(math.ceil((horizon - min(clock.offset, 0.0)) / min_gap)) + 1
    periods = 1 + rng.binomial(clock.binomial_n, p, size=n_gaps)
    turbulence = rng.uniform(-clock.turbulence_bound, clock.turbulence_bound, size=n_gaps)
    # integer period counts keep the turbulence-free case on the exact grid
    steps = np.concatenate(([0], np.cumsum(periods)))
    jitter = np.concatenate(([0.0], np.cumsum(turbulence)))
    timestamps = clock.offset + clock.nominal_period * steps + jitter
    timestamps = timestamps[timestamps < horizon]
    logger.debug(
        "Sampled %d timestamps for agent %d (p=%.4f).", len(timestamps), clock.agent_id, p
    )
    return Schedule(agent_id=clock.agent_id, timestamps=timestamps)


@dataclass(frozen=True)
class PoseNoiseSpec:
    """
    Gaussian noise on an agent's own pose: translation std in meters,
    heading std in radians.
    """

    sigma_t: float = 0.0
    sigma_r: float = 0.0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise ValueError(f"Pose noise must be non-negative, got {self}.")


@dataclass(frozen=True)
class DetectionNoiseSpec:
    center_sigma: float = 0.1
    heading_sigma: float = math.radians(1.0)
    miss_prob: float = 0.05
    base_conf: float = 0.9
    conf_decay: float = 0.004  # per meter of range

    def __post_init__(self):
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValueError(f"miss_prob must lie in [0, 1], got {self.miss_prob}.")
        if not 0.0 <= self.base_conf <= 1.0:
            raise ValueError(f"base_conf must lie in [0, 1], got {self.base_conf}.")


@dataclass(frozen=True)
class FieldOfView:
    """
    Circular sensing range around the agent, optionally clipped to a BEV extent
    (x_min, x_max, y_min, y_max).
    """

    x: float
    y: float
    radius: float
    extent: tuple[float, float, float, float] | None = None

    def visible(self, x: float, y: float) -> bool:
        return math.hypot(x - self.x, y - self.y) <= self.radius and self.in_extent(x, y)

    def in_extent(self, x: float, y: float) -> bool:
        if self.extent is None:
            return True
        x_min, x_max, y_min, y_max = self.extent
        return x_min <= x < x_max and y_min <= y < y_max


@dataclass(frozen=True)
class Observation:
    agent_id: int
    timestamp: float
    objects: list[OrientedBox]
    ground_truth: list[ObjectState]


def observe(
    world: list[ObjectState],
    agent_id: int,
    timestamp: float,
    fov: FieldOfView,
    noise: DetectionNoiseSpec,
    pose_noise: PoseNoiseSpec,
    rng_seed: int,
) -> Observation:
    """
    Produces one agent's noisy detections of the world at a timestamp.

    Visible objects get independent Gaussian jitter on center and heading and a
    confidence that decays with range; each is missed with the configured
    probability. The whole observation is then rigidly perturbed by the agent's
    pose error: a rotation about the agent origin followed by a translation.

    Args:
        world: The object states at ``timestamp``.
        agent_id: The observing agent.
        timestamp: Time of the observation in seconds.
        fov: Where the agent is and how far it sees.
        noise: Detection noise.
        pose_noise: Noise on the agent's own pose.
        rng_seed: Seed of this observation.

    Returns:
        Observation: Noisy boxes plus the exact states of every visible object.
    """
    rng = np.random.default_rng(rng_seed)
    visible = sorted(
        (obj for obj in world if fov.visible(obj.x, obj.y)), key=lambda o: o.id
    )
    n = len(visible)
    jitter_xy = rng.normal(0.0, noise.center_sigma, size=(n, 2))
    jitter_heading = rng.normal(0.0, noise.heading_sigma, size=n)
    missed = rng.random(size=n) < noise.miss_prob
    dx, dy = rng.normal(0.0, pose_noise.sigma_t, size=2)
    dr = rng.normal(0.0, pose_noise.sigma_r)
    cos_r, sin_r = math.cos(dr), math.sin(dr)

    boxes = []
    for i, obj in enumerate(visible):
        if missed[i]:
            continue
        rng_dist = math.hypot(obj.x - fov.x, obj.y - fov.y)
        conf = min(1.0, max(0.0, noise.base_conf - noise.conf_decay * rng_dist))
        x = obj.x + jitter_xy[i, 0]
        y = obj.y + jitter_xy[i, 1]
        heading = obj.heading + jitter_heading[i]
        if dr != 0.0:
            rx, ry = x - fov.x, y - fov.y
            x = fov.x + cos_r * rx - sin_r * ry
            y = fov.y + sin_r * rx + cos_r * ry
            heading = heading + dr
        x, y = x + dx, y + dy
        if not fov.in_extent(x, y):
            continue
        boxes.append(
            OrientedBox(
                x=float(x),
                y=float(y),
                length=obj.length,
                width=obj.width,
                heading=heading,
                confidence=conf,
            )
        )
    return Observation(
        agent_id=agent_id, timestamp=timestamp, objects=boxes, ground_truth=visible
    )


@dataclass(frozen=True)
class Scene:
    """
    A spawned world: initial object states at ``start_time``, stationary agents
    and the toroidal arena the objects drive around in.
    """

    scene_id: int
    seed: int
    start_time: float
    objects: list[ObjectState]
    agent_positions: list[tuple[float, float]]
    arena: tuple[float, float, float, float]
    fov_radius: float
    extent: tuple[float, float, float, float]

    @property
    def n_agents(self) -> int:
        return len(self.agent_positions)

    def state_at(self, t: float) -> list[ObjectState]:
        """
        World state at time t, computed in closed form from the initial state so
        that no integration error accumulates.
        """
        states = step_world(self.objects, t - self.start_time)
        x_min, x_max, y_min, y_max = self.arena
        return [
            replace(
                s,
                x=x_min + (s.x - x_min) % (x_max - x_min),
                y=y_min + (s.y - y_min) % (y_max - y_min),
            )
            for s in states
        ]

    def fov(self, agent_id: int) -> FieldOfView:
        x, y = self.agent_positions[agent_id]
        return FieldOfView(x=x, y=y, radius=self.fov_radius, extent=self.extent)

    def visible_truth(self, t: float) -> list[ObjectState]:
        """
        Objects visible to at least one agent at time t.
        """
        fovs = [self.fov(i) for i in range(self.n_agents)]
        return [s for s in self.state_at(t) if any(f.visible(s.x, s.y) for f in fovs)]


def sample_speed(
    rng: np.random.Generator, mean_kmh: float, cap_kmh: float, size: int, shape: float = 4.0
) -> np.ndarray:
    """
    Draws speeds in m/s from a gamma distribution with the given mean,
    clipped at the speed cap.
    """
    speeds = rng.gamma(shape, mean_kmh / shape, size=size)
    return np.minimum(speeds, cap_kmh) * KMH


def spawn_scene(
    scene_id: int,
    seed: int,
    extent: tuple[float, float, float, float],
    n_objects: tuple[int, int] = (30, 60),
    n_agents: int = 3,
    fov_radius: float = 35.0,
    agent_ring_radius: float = 30.0,
    arena_margin: float = 40.0,
    speed_mean_kmh: float = 25.0,
    speed_cap_kmh: float = 105.0,
    yaw_rate_std: float = 0.1,
    length_range: tuple[float, float] = (3.8, 5.0),
    width_range: tuple[float, float] = (1.7, 2.1),
    min_separation: float = 6.0,
    static: bool = False,
    start_time: float = -1.0,
) -> Scene:
    """
    Spawns a random scene. The ego agent (id 0) sits at the extent center, the
    collaborators on a ring around it.
    """
    if not 2 <= n_agents <= 5:
        raise ValueError(f"A scene has 2 to 5 agents, got {n_agents}.")
    rng = np.random.default_rng(derive_seed(seed, scene_id))
    x_min, x_max, y_min, y_max = extent
    arena = (x_min - arena_margin, x_max + arena_margin, y_min - arena_margin, y_max + arena_margin)
    cx, cy = 0.5 * (x_min + x_max), 0.5 * (y_min + y_max)

    ring_phase = rng.uniform(-math.pi, math.pi)
    agents = [(cx, cy)]
    for i in range(1, n_agents):
        a = ring_phase + 2 * math.pi * (i - 1) / (n_agents - 1)
        agents.append((cx + agent_ring_radius * math.cos(a), cy + agent_ring_radius * math.sin(a)))

    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    centers: list[tuple[float, float]] = []
    for _ in range(count * 50):
        if len(centers) == count:
            break
        x = rng.uniform(arena[0], arena[1])
        y = rng.uniform(arena[2], arena[3])
        if all(math.hypot(x - ax, y - ay) > 3.0 for ax, ay in agents) and all(
            math.hypot(x - px, y - py) >= min_separation for px, py in centers
        ):
            centers.append((x, y))
    if len(centers) < count:
        logger.warning(
            "Scene %d: placed only %d of %d objects with separation %.1fm.",
            scene_id,
            len(centers),
            count,
            min_separation,
        )
    n = len(centers)
    headings = rng.uniform(-math.pi, math.pi, size=n)
    speeds = sample_speed(rng, speed_mean_kmh, speed_cap_kmh, n)
    yaw_rates = rng.normal(0.0, yaw_rate_std, size=n)
    lengths = rng.uniform(*length_range, size=n)
    widths = rng.uniform(*width_range, size=n)
    if static:
        speeds = np.zeros(n)
        yaw_rates = np.zeros(n)
    objects = [
        ObjectState(
            id=i,
            x=centers[i][0],
            y=centers[i][1],
            heading=float(headings[i]),
            speed=float(speeds[i]),
            yaw_rate=float(yaw_rates[i]),
            length=float(lengths[i]),
            width=float(widths[i]),
        )
        for i in range(n)
    ]
    logger.debug("Spawned scene %d with %d objects and %d agents.", scene_id, n, n_agents)
    return Scene(
        scene_id=scene_id,
        seed=seed,
        start_time=start_time,
        objects=objects,
        agent_positions=agents,
        arena=arena,
        fov_radius=fov_radius,
        extent=extent,
    )


def make_clocks(
    scene_seed: int,
    scene_id: int,
    n_agents: int,
    interval_expectation: float,
    nominal_period: float = 0.1,
    offset_bound: float = 0.05,
    turbulence_bound: float = 0.01,
    binomial_n: int = 10,
) -> list[AgentClock]:
    """
    Builds the ego clock (agent 0, regular, no offset) and the collaborator
    clocks with a uniform start offset and per-timestamp turbulence.

    An interval expectation of 0 means synchronous collaboration: every
    collaborator ticks exactly with the ego.
    """
    ego = AgentClock(agent_id=0, nominal_period=nominal_period, interval_expectation=nominal_period)
    if interval_expectation == 0:
        return [ego] + [replace(ego, agent_id=i) for i in range(1, n_agents)]
    rng = np.random.default_rng(derive_seed(scene_seed, scene_id, 0xC10C))
    clocks = [ego]
    for i in range(1, n_agents):
        clocks.append(
            AgentClock(
                agent_id=i,
                offset=float(rng.uniform(-offset_bound, offset_bound)),
                turbulence_bound=turbulence_bound,
                nominal_period=nominal_period,
                interval_expectation=interval_expectation,
                binomial_n=binomial_n,
            )
        )
    return clocks
