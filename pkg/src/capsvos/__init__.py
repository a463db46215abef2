"""Semi-supervised video object segmentation with capsule routing, in numpy."""

from .config import ModelConfig, desk_preset, paper_preset
from .errors import (CapsVOSError, ConfigurationError, ContractError, DimensionError, DomainError,
                     NonFiniteLossError, ParameterError)
from .tensor import Tape, Tensor

__version__ = "0.1.0"
