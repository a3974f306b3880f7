""" Relay transformer backbone and its checkpoint container """

from .checkpoint import (
    CheckpointConfigError,
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .transformer import (
    ModelConfigError,
    ModelInputError,
    NumericError,
    RelayTransformer,
    allocated_parameters,
    build_model,
    parameter_count,
)

__all__ = [
    "CheckpointConfigError", "CheckpointError", "CheckpointShapeError", "CheckpointTruncatedError",
    "CheckpointVersionError", "load_checkpoint", "save_checkpoint",
    "ModelConfigError", "ModelInputError", "NumericError", "RelayTransformer", "allocated_parameters",
    "build_model", "parameter_count",
]
