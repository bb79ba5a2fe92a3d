"""Exception hierarchy shared by every eamnet module."""


class EamError(Exception):
    """Base class for all errors raised by eamnet."""

    category = "error"


class DimensionError(EamError, ValueError):
    category = "dimension"


class ConfigurationError(EamError, ValueError):
    category = "configuration"


class ValidationError(EamError, ValueError):
    category = "validation"


class UsageError(EamError, RuntimeError):
    category = "usage"


class DatasetError(EamError, ValueError):
    category = "dataset"


class TrainingDivergedError(EamError, RuntimeError):
    category = "divergence"

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite during epoch {epoch}")
