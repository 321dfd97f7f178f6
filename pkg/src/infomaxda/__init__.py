"""Mutual-information-preserving unsupervised domain adaptation on small numpy nets."""

from .numerics import Net, NumericalError, Rng, log_sum_exp, softmax
from .trainer import TrainConfig, train_dpn

__all__ = ["Net", "NumericalError", "Rng", "TrainConfig", "log_sum_exp", "softmax", "train_dpn"]
__version__ = "0.1.0"
