"""Racecar training: a reverse pass with tied transposed weights as a data-dependent orthogonality regularizer."""
__version__ = "0.1.0"

from .exceptions import (
    BuildError,
    CalibrationError,
    ConfigError,
    ContractError,
    NumericError,
    ParseError,
    RacecarError,
    ShapeError,
    TrainingError,
)
from .nn import Activation, BatchNorm, Conv2d, Dense, MaxPool, Upsample, build_network, forward
from .regularizers import RacecarConfig, racecar_loss
from .reverse import build_reverse, reverse_full, reverse_layerwise
from .training import TrainConfig, finetune, train
from .estimator import RacecarClassifier
