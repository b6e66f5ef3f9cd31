"""Class-conditional diffusion augmentation for patch-based WSI classification.

Built on a small float64 reverse-mode autodiff engine; numpy only at runtime
(plus scipy for smoothing the synthetic corpus).
"""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError, ContractError, DimensionError, DpmAugmentError, FormatError,
    LeakageError, NonFiniteError, ScheduleError,
)

__all__ = [
    "ConfigurationError", "ContractError", "DimensionError", "DpmAugmentError", "FormatError",
    "LeakageError", "NonFiniteError", "ScheduleError", "__version__",
]
