import logging

import optuna

from .parameters import BoolParameter, FloatParameter, IntFromOrderedListParameter

logger = logging.getLogger(__name__)

ESTIMATOR_PARAMETERS = [
    FloatParameter(
        "lr",
        default_value=1e-2,
        lb=1e-4,
        ub=1e-1,
        log=True,
        description="Adam step size.",
    ),
    IntFromOrderedListParameter(
        "d",
        default_index=1,
        values=[8, 16, 32],
        description="Token and time-code dimension.",
    ),
    IntFromOrderedListParameter(
        "n_heads",
        default_index=2,
        values=[1, 2, 4],
        description="Attention heads; every choice divides every d.",
    ),
    IntFromOrderedListParameter(
        "hidden",
        default_index=1,
        values=[16, 32, 64],
        description="Width of the token MLP and the output head.",
    ),
    FloatParameter(
        "angle_weight",
        default_value=1.0,
        lb=0.25,
        ub=4.0,
        log=True,
        description="Weight of the heading error in the training loss.",
    ),
    BoolParameter(
        "time_encoding",
        default_value=True,
        description="Add time codes to tokens and query. Off is the ablation without timing.",
    ),
]


class EstimatorParameterSpace:
    """
    The hyperparameter space of the motion estimator searched by Optuna.
    """

    def __init__(self):
        self.tunable_parameters = {param.name: param for param in ESTIMATOR_PARAMETERS}

    def drop_parameter(self, parameter: str):
        """
        Removes a parameter from the space, leaving it at its configured value.
        """
        if self.tunable_parameters.pop(parameter, None) is not None:
            logger.info("Dropping parameter `%s` from the search space.", parameter)

    def sample(self, trial: optuna.Trial | optuna.trial.FixedTrial | dict | None) -> dict:
        """
        Returns the sampled values that differ from their defaults.
        """
        if trial is None:
            return {}
        if isinstance(trial, dict):
            trial = optuna.trial.FixedTrial(trial)
        params = {}
        for parameter in self.tunable_parameters.values():
            value = parameter.sample(trial)
            if value != parameter.get_default():
                params[parameter.name] = value
        return params

    def get_default_params_for_optuna(self) -> dict:
        default_params = {}
        for param in self.tunable_parameters.values():
            default_params.update(param.get_optuna_default())
        return default_params

    def get_parameter_by_name(self, name: str):
        return self.tunable_parameters[name]
