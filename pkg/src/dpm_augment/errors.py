"""Exception hierarchy shared by every stage of the pipeline."""


class DpmAugmentError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DpmAugmentError, ValueError):
    """Operand shapes do not conform."""


class ContractError(DpmAugmentError, ValueError):
    """A documented precondition was violated by the caller."""


class ScheduleError(DpmAugmentError, ValueError):
    """A noise schedule breaks one of its invariants."""


class ConfigurationError(DpmAugmentError, ValueError):
    """Inconsistent or unknown configuration."""


class FormatError(DpmAugmentError, ValueError):
    """An on-disk artifact is malformed."""


class NonFiniteError(DpmAugmentError, FloatingPointError):
    """An operation produced NaN or Inf."""


class LeakageError(DpmAugmentError, RuntimeError):
    """Synthetic (augmented) data reached a held-out fold."""
