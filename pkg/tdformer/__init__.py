"""Desk-scale spiking transformer with top-down attention feedback, and the numerical checks behind it."""
from .errors import (ConfigurationError, DimensionError, NumericError, TDFormerError,
                     TrainingDivergedError, UninitializedStatisticsError)
from .model import ModelConfig, TDFormer, TrainingConfig, evaluate, train
from .neuron import LifConfig
from .tensor import Node, SpikeTensor, get_precision, no_grad, set_precision
from .topdown import SubnetSchedule

__version__ = "0.1.0"
