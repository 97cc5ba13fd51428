"""Exception types shared across the toolkit."""


class CertmarkError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(CertmarkError, ValueError):
    """An argument violates an operation's preconditions."""


class InvalidConfigurationError(InvalidArgumentError):
    """A config value is out of range or internally inconsistent."""


class DegenerateTrajectoryError(InvalidArgumentError):
    """A training trajectory carries no usable parameter movement."""


class SingularGeometryError(InvalidArgumentError):
    """A zero noise level meets a nonzero perturbation in the same block."""


class InsufficientSamplesError(InvalidArgumentError):
    """Too few observations for the requested statistic."""


class InfeasibleThresholdError(CertmarkError):
    """The closed-form decision threshold does not exist in (zeta, 1)."""


class NumericDomainError(CertmarkError, ArithmeticError):
    """A numeric routine left its valid domain (non-finite or impossible value)."""


class TrainingFailureError(CertmarkError, RuntimeError):
    """Optimization produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class AttackFailureError(CertmarkError, RuntimeError):
    """An attack routine could not produce a usable perturbation."""


class DegenerateAuditError(CertmarkError):
    """Output-side audit is undefined (zero reference dispersion)."""


class CheckpointFormatError(CertmarkError):
    """A checkpoint file is malformed or has an unsupported version."""


class UsageError(CertmarkError):
    """Bad command-line usage or invalid config file contents."""
