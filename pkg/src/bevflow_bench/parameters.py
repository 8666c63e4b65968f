"""
Auxiliary classes describing the estimator hyperparameters that can be tuned
with Optuna. They map between Optuna's sampled values and the values the
estimator configuration expects.
"""

from abc import ABC, abstractmethod

import optuna


class EstimatorParameter(ABC):
    """
    Abstract base class of a tunable estimator hyperparameter.
    """

    def __init__(self, name: str, default_value, description: str = ""):
        """
        Args:
            name: The name of the field in EstimatorConfig.
            default_value: The default value in Optuna's format.
            description: Shown next to tuned values in reports.
        """
        self.name = name
        self._default_value = default_value
        self.description = description

    @abstractmethod
    def sample(self, trial: optuna.Trial):
        """
        Samples the parameter and returns it in the estimator's format.
        """

    def get_optuna_default(self) -> dict:
        return {self.name: self._default_value}

    def get_default(self):
        """
        The default value in the estimator's format.
        """
        return self._default_value

    def get_estimator_params(self, optuna_params: dict) -> dict:
        return {self.name: optuna_params[self.name]}

    def get_optuna_params(self, estimator_params: dict) -> dict:
        return {self.name: estimator_params[self.name]}

    def __hash__(self) -> int:
        return hash(self.name)

    def __str__(self) -> str:
        return f"{self.name} [default: {self.get_default()}]"


class BoolParameter(EstimatorParameter):
    def sample(self, trial: optuna.Trial) -> bool:
        return trial.suggest_categorical(self.name, [True, False])


class FloatParameter(EstimatorParameter):
    """
    A real-valued parameter sampled from [lb, ub], optionally on a log scale.
    """

    def __init__(
        self,
        name: str,
        default_value: float,
        lb: float,
        ub: float,
        log: bool = False,
        description: str = "",
    ):
        super().__init__(name, default_value, description=description)
        if not lb <= default_value <= ub:
            raise ValueError(f"Default value {default_value} of {name} lies outside [{lb}, {ub}].")
        self.lower_bound = lb
        self.upper_bound = ub
        self.log = log

    def sample(self, trial: optuna.Trial) -> float:
        return trial.suggest_float(self.name, low=self.lower_bound, high=self.upper_bound, log=self.log)


class IntFromOrderedListParameter(EstimatorParameter):
    """
    An integer chosen from an ordered list of values. Optuna samples the index,
    so it can exploit the ordering.

    Note:
        The default value is the index of the value in the list, not the value itself.
    """

    def __init__(self, name: str, default_index: int, values: list, description: str = ""):
        super().__init__(name, default_index, description=description)
        if not 0 <= default_index < len(values):
            raise ValueError(f"Default index {default_index} of {name} is out of range.")
        self.values = values

    def sample(self, trial: optuna.Trial):
        return self.values[trial.suggest_int(self.name, low=0, high=len(self.values) - 1)]

    def get_default(self):
        return self.values[self._default_value]

    def get_estimator_params(self, optuna_params: dict) -> dict:
        return {self.name: self.values[optuna_params[self.name]]}

    def get_optuna_params(self, estimator_params: dict) -> dict:
        return {self.name: self.values.index(estimator_params[self.name])}
