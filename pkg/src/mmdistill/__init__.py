"""Teacher-to-student knowledge distillation for small visual-prefix language models."""

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    LengthError,
    MMDistillError,
    NumericError,
    ParameterError,
    TokenizationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "LengthError",
    "MMDistillError",
    "NumericError",
    "ParameterError",
    "TokenizationError",
    "__version__",
]
