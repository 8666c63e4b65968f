"""
Scenario and experiment configuration.

Both are plain dataclasses loaded from YAML. Every field has a default, so an
empty file yields the standard benchmark scenario. Unknown keys are rejected.
"""

import dataclasses
import hashlib
import json
import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

logger = logging.getLogger(__name__)

METHODS = (
    "single_agent",
    "no_compensation",
    "late_fusion",
    "box_warp",
    "feature_warp_cv",
    "feature_warp_mha",
    "sync_ideal",
)
MATCHERS = ("greedy", "hungarian")


@dataclass
class WorldConfig:
    n_scenes: int = 20
    horizon: float = 40.0
    n_objects: tuple[int, int] = (30, 60)
    speed_mean_kmh: float = 25.0
    speed_cap_kmh: float = 105.0
    yaw_rate_std: float = 0.1
    length_range: tuple[float, float] = (3.8, 5.0)
    width_range: tuple[float, float] = (1.7, 2.1)
    min_separation: float = 6.0
    arena_margin: float = 40.0
    static: bool = False


@dataclass
class AgentsConfig:
    count: int = 3
    nominal_period: float = 0.1
    offset_bound: float = 0.05
    turbulence_bound: float = 0.01
    # the frame-interval distribution is Binomial(binomial_n, p); n is a free choice
    binomial_n: int = 10
    fov_radius: float = 35.0
    ring_radius: float = 30.0


@dataclass
class NoiseConfig:
    center_sigma: float = 0.1
    heading_sigma_deg: float = 1.0
    miss_prob: float = 0.05
    base_conf: float = 0.9
    conf_decay: float = 0.004
    sigma_t: float = 0.0
    sigma_r_deg: float = 0.0


@dataclass
class GridConfig:
    extent: tuple[float, float, float, float] = (-51.2, 51.2, -51.2, 51.2)
    cell: float = 0.4
    channels: int = 15


@dataclass
class CodecConfig:
    conf_threshold: float = 0.5
    nms_iou: float = 0.3
    k_roi: int = 100


@dataclass
class TrackerConfig:
    half_angle_deg: float = 45.0
    history: int = 3
    staleness: int = 2
    cost_margin: float = 3.0
    matcher: str = "greedy"


@dataclass
class EstimatorConfig:
    d: int = 16
    n_heads: int = 4
    hidden: int = 32
    lr: float = 1e-2
    epochs: int = 500
    batch_size: int = 64
    angle_weight: float = 1.0
    time_unit: float = 0.1
    time_encoding: bool = True
    position_scale: float = 10.0
    n_train_samples: int = 2000
    train_seed: int = 10_000


@dataclass
class ScenarioConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    agents: AgentsConfig = field(default_factory=AgentsConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    seed: int = 0
    eval_start: float = 2.0
    eval_stride: int = 10

    def validate(self) -> None:
        if not 2 <= self.agents.count <= 5:
            raise ValueError(f"agents.count must lie in [2, 5], got {self.agents.count}.")
        if self.tracker.matcher not in MATCHERS:
            raise ValueError(
                f"tracker.matcher must be one of {MATCHERS}, got '{self.tracker.matcher}'."
            )
        if self.tracker.history < 1:
            raise ValueError(f"tracker.history must be positive, got {self.tracker.history}.")
        if self.codec.k_roi < 1:
            raise ValueError(f"codec.k_roi must be at least 1, got {self.codec.k_roi}.")
        if self.estimator.d % 2 or self.estimator.d % self.estimator.n_heads:
            raise ValueError(
                f"estimator.d ({self.estimator.d}) must be even and divisible by "
                f"n_heads ({self.estimator.n_heads})."
            )
        if self.eval_stride < 1:
            raise ValueError(f"eval_stride must be positive, got {self.eval_stride}.")

    @property
    def speed_cap(self) -> float:
        return self.world.speed_cap_kmh / 3.6

    @property
    def half_angle(self) -> float:
        return math.radians(self.tracker.half_angle_deg)


@dataclass
class ExperimentConfig:
    """
    A sweep over interval expectations, pose-noise levels and ROI caps, run
    for a set of methods and seeds on one scenario.
    """

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    intervals_ms: list[float] = field(default_factory=lambda: [0, 100, 200, 300, 400, 500])
    # (sigma_t in meters, sigma_r in degrees)
    pose_noise: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0)])
    k_roi_caps: list[int] = field(default_factory=list)
    methods: list[str] = field(
        default_factory=lambda: ["no_compensation", "feature_warp_mha", "sync_ideal"]
    )
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "results"
    params_path: str | None = None
    workers: int = 1

    def validate(self) -> None:
        self.scenario.validate()
        if not self.intervals_ms or not self.pose_noise or not self.methods or not self.seeds:
            raise ValueError("intervals_ms, pose_noise, methods and seeds must be nonempty.")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            logger.error("Unknown methods %s. Valid methods are %s.", unknown, METHODS)
            raise ValueError(f"Unknown methods {unknown}; choose from {METHODS}.")
        nominal_ms = 1000 * self.scenario.agents.nominal_period
        for interval in self.intervals_ms:
            if interval != 0 and interval < nominal_ms:
                raise ValueError(
                    f"Interval expectation {interval}ms is neither 0 nor at least the "
                    f"nominal period {nominal_ms}ms."
                )
        if any(cap < 1 for cap in self.k_roi_caps):
            raise ValueError(f"k_roi_caps must be positive, got {self.k_roi_caps}.")
        if self.workers < 1:
            raise ValueError(f"workers must be positive, got {self.workers}.")

    @property
    def caps(self) -> list[int]:
        return list(self.k_roi_caps) or [self.scenario.codec.k_roi]


def _build(cls, data: dict | None, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"Section '{where}' must be a mapping, got {type(data).__name__}.")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        logger.error("Unknown keys %s in section '%s'.", unknown, where)
        raise ValueError(f"Unknown keys {unknown} in section '{where}'.")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}" if where else key)
        elif typing.get_origin(hint) is tuple:
            kwargs[key] = tuple(value)
        elif key == "pose_noise":
            kwargs[key] = [tuple(level) for level in value]
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _read_yaml(path: Path | str) -> dict:
    if isinstance(path, str):
        path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Configuration file {path} does not exist.")
    with path.open("r") as file:
        return yaml.safe_load(file) or {}


def scenario_from_dict(data: dict | None) -> ScenarioConfig:
    config = _build(ScenarioConfig, data, "")
    config.validate()
    return config


def experiment_from_dict(data: dict | None, base_dir: Path | None = None) -> ExperimentConfig:
    data = dict(data or {})
    scenario_path = data.pop("scenario_path", None)
    if scenario_path is not None:
        if "scenario" in data:
            raise ValueError("Give either 'scenario' or 'scenario_path', not both.")
        path = Path(scenario_path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        data["scenario"] = _read_yaml(path)
    config = _build(ExperimentConfig, data, "")
    config.validate()
    return config


def load_scenario_config(path: Path | str) -> ScenarioConfig:
    """
    Loads a scenario from a YAML file.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: On unknown keys or invalid values.
    """
    return scenario_from_dict(_read_yaml(path))


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    """
    Loads an experiment from a YAML file. The scenario is either inlined under
    ``scenario`` or referenced by ``scenario_path`` (relative to the file).
    """
    return experiment_from_dict(_read_yaml(path), base_dir=Path(path).parent)


def to_dict(config) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(config)))


def config_hash(config) -> str:
    """
    SHA-256 of the canonical JSON dump of a resolved config.
    """
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
