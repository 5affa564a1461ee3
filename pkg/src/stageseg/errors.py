class StagesegError(Exception):
    """Base class for all package errors."""


class ConfigError(StagesegError):
    """Invalid or inconsistent configuration."""


class ShapeError(StagesegError):
    """Tensor shape violates a block or network contract."""


class ContractError(StagesegError):
    """A caller broke an operation precondition (missing inputs, bad ranges)."""


class TrainingDiverged(StagesegError):
    """Loss became non-finite during optimization."""
