"""Exception types shared across the package."""


class FedDWError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(FedDWError, ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(FedDWError, ValueError):
    """A file or byte stream does not match its declared format."""


class ConfigError(FedDWError, ValueError):
    """A run configuration is malformed or inconsistent."""


class OracleError(FedDWError, RuntimeError):
    """A numerical oracle (e.g. finite differences) hit a non-finite value."""


class TrainingDivergedError(FedDWError, RuntimeError):
    """Gradients or losses became non-finite during optimization."""


class RoundFailureError(FedDWError, RuntimeError):
    """No client in a communication round produced a usable report.

    Carries the round records completed so far in ``records``.
    """

    def __init__(self, message, records=()):
        super().__init__(message)
        self.records = list(records)


class ArtifactNotFoundError(FedDWError, FileNotFoundError):
    """A required run artifact is missing on disk."""
