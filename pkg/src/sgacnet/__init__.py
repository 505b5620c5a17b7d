"""RGB-D semantic segmentation built from scratch on numpy.

Tensors with tape-based reverse-mode autodiff, convolutional building blocks,
attention fusion of colour and depth encoders, pyramid context, a lightweight
decoder, and cost/metric accounting around them.
"""
from .config import FULL_RUN, TOY_MODEL, TOY_RUN, TOY_TRAIN_RUN, RunConfig, parse_config
from .cost import benchmark, count_flops, count_params
from .errors import ConfigError, DataError, DimensionError, ImageFormatError, InvalidSpecError, StateError
from .gradcheck import grad_check
from .metrics import ConfusionMatrix, metrics
from .model import SGD, ModelConfig, SGACNet, build, ce_loss, predict, train_step
from .tensor import Tape, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "FULL_RUN", "TOY_MODEL", "TOY_RUN", "TOY_TRAIN_RUN", "RunConfig", "parse_config",
    "benchmark", "count_flops", "count_params",
    "ConfigError", "DataError", "DimensionError", "ImageFormatError", "InvalidSpecError", "StateError",
    "grad_check", "ConfusionMatrix", "metrics",
    "SGD", "ModelConfig", "SGACNet", "build", "ce_loss", "predict", "train_step",
    "Tape", "Tensor", "no_grad",
]
