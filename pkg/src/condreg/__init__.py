"""Parameter-free regularizers for disentangling a binary sensitive attribute
from learned embeddings.

The regularizers compare the two conditional embedding distributions
(``Z | S=0`` and ``Z | S=1``) with closed-form or Sinkhorn-based similarity
measures, so no adversary has to be trained alongside the encoder.
"""

from condreg.errors import (
    ConfigError,
    DataBalanceError,
    DegenerateCovarianceError,
    InsufficientSampleError,
    NumericError,
    ParameterError,
    ParseError,
    ShapeError,
    SingleClassBatchError,
    UndefinedCorrelationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataBalanceError",
    "DegenerateCovarianceError",
    "InsufficientSampleError",
    "NumericError",
    "ParameterError",
    "ParseError",
    "ShapeError",
    "SingleClassBatchError",
    "UndefinedCorrelationError",
]
