"""Exception hierarchy shared by every module."""


class AffEditError(Exception):
    """Base class for all package errors."""

    kind = "error"


class InvalidInputError(AffEditError, ValueError):
    kind = "invalid-input"


class ConfigurationError(AffEditError, ValueError):
    kind = "configuration"


class InvalidStepError(AffEditError, ValueError):
    kind = "invalid-step"


class EmptyBatchError(AffEditError):
    kind = "empty-batch"


class DivergenceError(AffEditError, RuntimeError):
    kind = "divergence"


class SupervisionUnavailableError(AffEditError, RuntimeError):
    kind = "supervision-unavailable"


class SequencingError(AffEditError, RuntimeError):
    kind = "sequencing"


class ValidationUnavailableError(AffEditError, RuntimeError):
    kind = "validation-unavailable"


class MissingArtifactError(AffEditError, FileNotFoundError):
    """A checkpoint or manifest a command depends on does not exist."""

    kind = "missing-artifact"

    def __init__(self, path, producer=None):
        self.path = str(path)
        self.producer = producer
        msg = f"missing artifact: {self.path}"
        if producer:
            msg += f" (produce it with `affedit {producer}`)"
        super().__init__(msg)
