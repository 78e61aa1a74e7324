"""Physics-informed invertible networks for Bayesian inverse problems."""

from .config import ExperimentConfig
from .engine import (fit_coefficients, importance_reweight, log_marginal_c, sample_posterior,
                     train, TrainConfig)
from .flow import InnModel, inn_forward, inn_inverse, log_q_joint
from .networks import NeuralBasis, ParamSet
from .runner import run_experiment

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "InnModel", "NeuralBasis", "ParamSet", "TrainConfig",
    "fit_coefficients", "importance_reweight", "inn_forward", "inn_inverse",
    "log_marginal_c", "log_q_joint", "run_experiment", "sample_posterior", "train",
]
