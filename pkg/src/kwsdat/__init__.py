"""Small-footprint keyword spotting with disentangled adversarial training.

Everything runs on numpy: a reverse-mode autodiff core, a log-Mel frontend,
the MN7-45 bottleneck network with optional SimAM attention, per-datasource
batch-normalization branches, PGD adversaries, and detection metrics.
"""

from .errors import (ConfigError, ContractError, DataError, DimensionError, FormatError, IntegrityError,
                     KwsError, NumericError, RoutingError, VersionError)
from .model import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, grad, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DimensionError", "FormatError", "IntegrityError",
    "KwsError", "NumericError", "RoutingError", "VersionError",
    "Model", "ModelConfig", "build_model", "load_checkpoint", "save_checkpoint",
    "Tensor", "backward", "grad", "no_grad",
]
