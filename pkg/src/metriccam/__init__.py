"""metriccam: a small metric-depth toolkit.

Covers the full loop for single-image metric depth experiments at toy
scale: pinhole camera models and canonical-focal transforms, a
deterministic ray-cast scene renderer, depth losses with hand-derived
analytic gradients, a tiny convolutional depth network trained with
Adam, standard depth metrics, and point-cloud reconstruction /
evaluation utilities.
"""

__version__ = "0.1.0"

from .errors import (
    DegenerateInputError,
    DivergenceError,
    DomainError,
    FileFormatError,
    MetricCamError,
    StateError,
)

__all__ = [
    "__version__",
    "MetricCamError",
    "DomainError",
    "DegenerateInputError",
    "StateError",
    "DivergenceError",
    "FileFormatError",
]
