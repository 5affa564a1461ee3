"""Multi-stage encoder-decoder segmentation networks and a hybrid 2D/3D trainer."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    ShapeError,
    StagesegError,
    TrainingDiverged,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "ShapeError",
    "StagesegError",
    "TrainingDiverged",
    "__version__",
]
