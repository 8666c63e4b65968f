"""
Hyperparameter tuning of the motion estimator with Optuna.
"""

import logging
from dataclasses import dataclass

import optuna

from .caching_scorer import CachingScorer, MultiResult
from .config import EstimatorConfig
from .estimator import TrainingSample
from .parameter_space import EstimatorParameterSpace
from .print_result import print_tuning_result

logger = logging.getLogger(__name__)


@dataclass
class TuningResult:
    best: MultiResult
    default: MultiResult
    config: EstimatorConfig

    @property
    def improved(self) -> bool:
        return bool(self.best.params) and self.best.mean() < self.default.mean()


class EstimatorObjective:
    """
    Called by Optuna to score a trial. Trials that look like the best so far
    are re-scored with more seeds before they are trusted.
    """

    def __init__(
        self,
        parameter_space: EstimatorParameterSpace,
        scorer: CachingScorer,
        n_samples_for_trial: int = 2,
        n_samples_for_verification: int = 5,
    ):
        self.parameter_space = parameter_space
        self.scorer = scorer
        self.n_samples_for_trial = n_samples_for_trial
        self.n_samples_for_verification = n_samples_for_verification

    def get_baseline(self) -> MultiResult:
        return self.scorer.evaluate({}, self.n_samples_for_verification)

    def __call__(self, trial: optuna.Trial) -> float:
        params = self.parameter_space.sample(trial)
        baseline = self.get_baseline()
        knockout_score = baseline.max() + 0.1 * baseline.spread()
        score = self.scorer.evaluate(params, self.n_samples_for_trial, knockout_score=knockout_score)
        if score.mean() <= self.scorer.best().mean():
            logger.info("The trial yielded the best result so far, increasing the number of samples to be sure.")
            score = self.scorer.evaluate(params, self.n_samples_for_verification, knockout_score=knockout_score)
        return score.mean()

    def best_params(self) -> MultiResult:
        """
        The best verified parameters. Only results with the full number of
        verification samples compete, so a lucky short trial cannot win.
        """
        verified = [r for r in self.scorer if len(r) >= self.n_samples_for_verification]
        return min(verified, key=lambda r: r.mean())


def tune_estimator(
    train_set: list[TrainingSample],
    val_set: list[TrainingSample],
    base_config: EstimatorConfig | None = None,
    n_trials: int = 20,
    n_samples_for_trial: int = 2,
    n_samples_for_verification: int = 5,
    seed: int = 0,
    fixed: tuple[str, ...] = (),
    show: bool = True,
) -> TuningResult:
    """
    Searches the estimator hyperparameters that minimize the validation loss.

    The default hyperparameters are enqueued as the first trial, so the
    result is never worse than the defaults on the samples seen.

    Args:
        train_set: Samples the candidates are trained on.
        val_set: Held-out samples the candidates are scored on.
        base_config: Values of everything that is not tuned.
        n_trials: The number of Optuna trials.
        n_samples_for_trial: Training seeds per trial.
        n_samples_for_verification: Training seeds for promising trials and the defaults.
        seed: Seed of the TPE sampler.
        fixed: Parameters to keep at their configured value.
        show: Print the result with rich.

    Returns:
        TuningResult: Best and default scores, and the tuned configuration.
    """
    if n_trials < 1:
        logger.error("Tuning needs at least one trial, got %s.", n_trials)
        raise ValueError(f"n_trials must be at least 1, got {n_trials}.")
    logger.info("Starting hyperparameter tuning with %s trials.", n_trials)
    parameter_space = EstimatorParameterSpace()
    for name in fixed:
        parameter_space.drop_parameter(name)
    scorer = CachingScorer(train_set, val_set, base_config)

    objective = EstimatorObjective(
        parameter_space,
        scorer=scorer,
        n_samples_for_trial=n_samples_for_trial,
        n_samples_for_verification=n_samples_for_verification,
    )
    default_baseline = objective.get_baseline()
    logger.info(
        "Baseline evaluation completed: min=%s, mean=%s, max=%s",
        default_baseline.min(),
        default_baseline.mean(),
        default_baseline.max(),
    )

    study = optuna.create_study(direction="minimize", sampler=optuna.samplers.TPESampler(seed=seed))
    study.enqueue_trial(parameter_space.get_default_params_for_optuna())
    study.optimize(objective, n_trials=n_trials)

    best = objective.best_params()
    logger.info("Best parameters found: %s. Score: %s", best.params, best.mean())
    result = TuningResult(best=best, default=default_baseline, config=scorer.config_for(best.params))
    if show:
        print_tuning_result(result, parameter_space)
    return result
