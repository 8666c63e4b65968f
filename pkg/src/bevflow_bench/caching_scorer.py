import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import EstimatorConfig
from .errors import EstimatorDivergedError
from .estimator import TrainingSample, evaluate_loss, train_estimator

logger = logging.getLogger(__name__)


@dataclass
class MultiResult:
    """
    Instead of just the mean score, we store all samples to compute additional statistics.
    """

    scores: list[float]
    params: dict[str, float | int | bool]

    def mean(self) -> float:
        return sum(self.scores) / len(self.scores)

    def max(self) -> float:
        return float(np.max(self.scores))

    def min(self) -> float:
        return float(np.min(self.scores))

    def spread(self) -> float:
        return self.max() - self.min()

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self):
        return iter(self.scores)

    def as_knockout_result(self) -> "MultiResult":
        return MultiResult(params=self.params, scores=[self.max()] * len(self.scores))


class CachingScorer:
    """
    Scoring a set of hyperparameters means training the estimator once per
    seed and measuring the validation loss, which is expensive. Results are
    cached per parameter set, so that later requests for more seeds only train
    the missing ones. Lower scores are better.
    """

    def __init__(
        self,
        train_set: list[TrainingSample],
        val_set: list[TrainingSample],
        base_config: EstimatorConfig | None = None,
    ) -> None:
        if not train_set or not val_set:
            raise ValueError("Tuning needs a nonempty training and validation set.")
        self.train_set = train_set
        self.val_set = val_set
        self.base_config = base_config or EstimatorConfig()
        self._cache: dict[frozenset, MultiResult] = {}

    def config_for(self, params: dict) -> EstimatorConfig:
        return dataclasses.replace(self.base_config, **params)

    def _score(self, params: dict, seed: int) -> float:
        config = self.config_for(params)
        try:
            model = train_estimator(self.train_set, config, seed=seed).model
        except EstimatorDivergedError as exc:
            logger.warning("Training diverged for %s (seed %d): %s", params, seed, exc)
            return math.inf
        return evaluate_loss(model, self.val_set, config.angle_weight)

    def evaluate(self, params: dict, num_runs: int = 1, knockout_score: float | None = None) -> MultiResult:
        """
        Args:
            params: The hyperparameters that differ from the base config.
            num_runs: The number of training seeds to average the score over.
            knockout_score: Abort early if a score is worse than this value.
        """
        logger.info("Evaluating params %s with %d runs.", params, num_runs)
        key = frozenset(params.items())
        result = self._cache.get(key, MultiResult(scores=[], params=dict(params)))
        if len(result) >= num_runs:
            logger.debug("Returning cached result.")
            return result
        if knockout_score is not None and len(result) > 0 and result.max() >= knockout_score:
            return result.as_knockout_result()
        for seed in range(len(result), num_runs):
            score = self._score(params, seed)
            result.scores.append(score)
            logger.debug("Seed %d: validation loss %s", seed, score)
            if knockout_score is not None and score >= knockout_score:
                self._cache[key] = result
                logger.info("Returning knockout result.")
                return result.as_knockout_result()
        self._cache[key] = result
        return result

    def best(self) -> MultiResult:
        return min(self._cache.values(), key=lambda r: r.mean())

    def __iter__(self):
        return iter(self._cache.values())
