"""FourCropNet: residual CNN with squeeze-and-excitation attention for crop disease images."""
from .errors import (
    ChecksumError,
    ConfigError,
    DataError,
    DimensionMismatchError,
    FourCropNetError,
    NumericalError,
    VerificationError,
    VersionError,
)
from .model import FourCropNet, ModelConfig, build_model, count_parameters, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
