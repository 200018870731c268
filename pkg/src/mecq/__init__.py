"""Quantization-aware training with an entropy-of-features regularizer.

The package trains small fake-quantized networks while pushing up a coding
length of the backbone features, estimated by a mixture of truncated matrix
series centered at several expansion points. Diagnostics cover feature
collapse (rectified spectral entropy) and loss sharpness (Hessian spectrum
probes).
"""

from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NumericalError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "NumericalError",
    "ValidationError",
    "__version__",
]
