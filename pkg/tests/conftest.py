import pytest

from bevflow_bench.config import ExperimentConfig, scenario_from_dict
from bevflow_bench.roi_codec import GridSpec


@pytest.fixture
def small_spec() -> GridSpec:
    return GridSpec(extent=(-12.8, 12.8, -12.8, 12.8), cell=0.4, channels=11)


@pytest.fixture
def tiny_scenario():
    return scenario_from_dict(
        {
            "world": {
                "n_scenes": 1,
                "horizon": 4.0,
                "n_objects": [20, 30],
                "arena_margin": 10.0,
            },
            "agents": {"count": 3, "fov_radius": 30.0, "ring_radius": 15.0},
            "grid": {"extent": [-25.6, 25.6, -25.6, 25.6], "cell": 0.4, "channels": 11},
            "estimator": {"epochs": 5, "n_train_samples": 64, "batch_size": 32},
            "eval_start": 2.0,
            "eval_stride": 5,
            "seed": 3,
        }
    )


@pytest.fixture
def tiny_experiment(tiny_scenario, tmp_path) -> ExperimentConfig:
    return ExperimentConfig(
        scenario=tiny_scenario,
        intervals_ms=[0, 300],
        methods=["single_agent", "no_compensation", "feature_warp_cv", "sync_ideal"],
        seeds=[0],
        output_dir=str(tmp_path / "out"),
    )
