from .config import ExperimentConfig, ScenarioConfig, load_experiment_config, load_scenario_config
from .estimator import load_params, save_params, train_estimator
from .pipeline import run_pipeline
from .report import emit_report
from .tune import tune_estimator

__all__ = [
    "ExperimentConfig",
    "ScenarioConfig",
    "emit_report",
    "load_experiment_config",
    "load_params",
    "load_scenario_config",
    "run_pipeline",
    "save_params",
    "train_estimator",
    "tune_estimator",
]
