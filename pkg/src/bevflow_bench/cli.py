import dataclasses
import functools
import logging
from pathlib import Path

import click
import yaml

from .config import (
    METHODS,
    ExperimentConfig,
    ScenarioConfig,
    load_experiment_config,
    load_scenario_config,
    to_dict,
)
from .errors import BevFlowError
from .estimator import evaluate_loss, load_params, make_training_set, save_params, train_estimator
from .pipeline import SweepPoint, replay, run_pipeline, simulate_logs
from .print_result import print_run_report
from .report import emit_report
from .tune import tune_estimator

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler()],
)
logger = logging.getLogger(__name__)


def _diagnose(command):
    """
    Turns expected failures into a one-line diagnostic and exit code 1.
    """

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (BevFlowError, ValueError, FileNotFoundError) as exc:
            logger.debug("Command failed.", exc_info=True)
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _scenario(config_path: str | None, seed: int | None) -> ScenarioConfig:
    scenario = load_scenario_config(config_path) if config_path else ScenarioConfig()
    if seed is not None:
        scenario.seed = seed
    return scenario


def _training_set(scenario: ScenarioConfig, n: int, seed: int):
    return make_training_set(
        n,
        seed=seed,
        k=scenario.tracker.history,
        nominal_period=scenario.agents.nominal_period,
        turbulence_bound=scenario.agents.turbulence_bound,
        speed_mean_kmh=scenario.world.speed_mean_kmh,
        speed_cap_kmh=scenario.world.speed_cap_kmh,
        yaw_rate_std=scenario.world.yaw_rate_std,
        center_sigma=scenario.noise.center_sigma,
        static=scenario.world.static,
    )


@click.group()
@click.option("--verbose", is_flag=True, help="Log debug messages.")
def cli(verbose):
    """Benchmark for latency-robust collaborative BEV perception."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


output_dir_option = click.option(
    "--output-dir",
    type=click.Path(file_okay=False),
    envvar="BEVFLOW_OUTPUT_DIR",
    default=None,
    help="Output directory. Overrides the configuration; also read from BEVFLOW_OUTPUT_DIR.",
)


@click.command(help="Simulate scenes and write collaborator message logs plus ego observation logs.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML.")
@click.option("--interval-ms", type=float, default=300.0, show_default=True, help="Expected message interval.")
@click.option("--sigma-t", type=float, default=0.0, show_default=True, help="Pose translation noise [m].")
@click.option("--sigma-r", type=float, default=0.0, show_default=True, help="Pose rotation noise [deg].")
@click.option("--k-roi", type=int, default=None, help="ROI cap per message. Defaults to the scenario's.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@output_dir_option
@_diagnose
def simulate(config_path, interval_ms, sigma_t, sigma_r, k_roi, seed, output_dir):
    scenario = _scenario(config_path, seed)
    point = SweepPoint(interval_ms, sigma_t, sigma_r, k_roi or scenario.codec.k_roi)
    ExperimentConfig(scenario=scenario, intervals_ms=[interval_ms], pose_noise=[(sigma_t, sigma_r)]).validate()
    paths = simulate_logs(scenario, point, Path(output_dir or "logs"))
    click.echo(f"Wrote {len(paths)} files to {Path(output_dir or 'logs')}.")


@click.command(help="Train the motion estimator on simulated tracklets and write its params file.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML.")
@click.option("--output", type=click.Path(dir_okay=False), default="estimator.bin", show_default=True)
@click.option("--samples", type=int, default=None, help="Training samples. Defaults to the scenario's.")
@click.option("--epochs", type=int, default=None, help="Epochs. Defaults to the scenario's.")
@click.option("--seed", type=int, default=None, help="Seed of data and initialization.")
@_diagnose
def train(config_path, output, samples, epochs, seed):
    scenario = _scenario(config_path, None)
    est = scenario.estimator
    if epochs is not None:
        est = dataclasses.replace(est, epochs=epochs)
    seed = est.train_seed if seed is None else seed
    train_set = _training_set(scenario, samples or est.n_train_samples, seed)
    val_set = _training_set(scenario, max(1, (samples or est.n_train_samples) // 4), seed + 1)
    result = train_estimator(train_set, est, seed=seed)
    val_loss = evaluate_loss(result.model, val_set, est.angle_weight)
    save_params(result.model, output)
    click.echo(
        f"Training loss {result.initial_loss:.6f} -> {result.final_loss:.6f}, "
        f"validation loss {val_loss:.6f}. Params written to {output}."
    )


@click.command(
    help="""
    Tune the estimator hyperparameters with Optuna.

    Candidates are trained on simulated tracklets and scored by their loss on a
    held-out set. The tuned estimator section is written as YAML.
    """
)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML.")
@click.option("--n-trials", type=int, default=20, show_default=True, help="Number of Optuna trials.")
@click.option("--n-samples-trial", type=int, default=2, show_default=True, help="Training seeds per trial.")
@click.option(
    "--n-samples-verification", type=int, default=5, show_default=True, help="Training seeds for verification."
)
@click.option("--samples", type=int, default=500, show_default=True, help="Training samples.")
@click.option("--epochs", type=int, default=100, show_default=True, help="Epochs per candidate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False), default="estimator.yaml", show_default=True)
@_diagnose
def tune(config_path, n_trials, n_samples_trial, n_samples_verification, samples, epochs, seed, output):
    scenario = _scenario(config_path, None)
    base = dataclasses.replace(scenario.estimator, epochs=epochs)
    result = tune_estimator(
        _training_set(scenario, samples, seed),
        _training_set(scenario, max(1, samples // 4), seed + 1),
        base_config=base,
        n_trials=n_trials,
        n_samples_for_trial=n_samples_trial,
        n_samples_for_verification=n_samples_verification,
        seed=seed,
    )
    Path(output).write_text(yaml.safe_dump({"estimator": to_dict(result.config)}, sort_keys=True))
    click.echo(f"Best parameters: {result.best.params}")


@click.command(help="Run a full sweep and write results.csv, SVG plots and a config snapshot.")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False), required=False)
@output_dir_option
@click.option("--seed", type=int, default=None, help="Run this single seed instead of the configured ones.")
@click.option("--workers", type=int, default=None, help="Worker processes. Defaults to the configuration.")
@click.option("--params", "params_path", type=click.Path(dir_okay=False), default=None, help="Estimator params file.")
@click.option("--no-resume", is_flag=True, help="Recompute sweep points that are already done.")
@_diagnose
def run(config_path, output_dir, seed, workers, params_path, no_resume):
    config = load_experiment_config(config_path) if config_path else ExperimentConfig()
    if output_dir is not None:
        config.output_dir = output_dir
    if seed is not None:
        config.seeds = [seed]
    if workers is not None:
        config.workers = workers
    if params_path is not None:
        config.params_path = params_path
    report = run_pipeline(config, resume=not no_resume)
    emit_report(report, config.output_dir)
    print_run_report(report)


@click.command(help="Re-evaluate a recorded scene with one method.")
@click.argument("message_log", type=click.Path(exists=True, dir_okay=False))
@click.argument("ego_log", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Scenario YAML.")
@click.option(
    "--method",
    type=click.Choice([m for m in METHODS if m != "sync_ideal"]),
    default="feature_warp_cv",
    show_default=True,
)
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False), default=None)
@_diagnose
def replay_log(message_log, ego_log, config_path, method, params_path):
    scenario = _scenario(config_path, None)
    params = load_params(params_path) if params_path else None
    row = replay(message_log, ego_log, scenario, method, params)
    click.echo(
        f"{method}: AP@0.5 {row.ap50:.4f}, AP@0.7 {row.ap70:.4f}, "
        f"mean center error {row.mean_center_err:.3f}m, comm. volume {row.comm_volume:.2f}"
    )


cli.add_command(simulate)
cli.add_command(train)
cli.add_command(tune)
cli.add_command(run)
cli.add_command(replay_log, name="replay")

if __name__ == "__main__":
    cli()
