"""Exception hierarchy shared across the package."""


class EntconError(Exception):
    """Base class for all package errors."""


class ContractError(EntconError):
    """An operation was called with arguments violating its contract
    (shape mismatch, missing cache, undersized input)."""


class ParameterError(EntconError):
    """A hyperparameter or argument is outside its documented range."""


class ConfigError(EntconError):
    """A run configuration is inconsistent or incomplete."""


class FormatError(EntconError):
    """A file is not in the expected on-disk format (e.g. missing sidecar)."""


class CorruptFileError(EntconError):
    """A file's payload disagrees with its header."""


class GenerationError(EntconError):
    """Synthetic-volume generation could not satisfy its constraints."""


class TrainingDivergedError(EntconError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
