"""Fixed-length fingerprint representation toolkit.

Encodes minutiae point sets as multi-channel heatmaps, aligns crops with a
differentiable sampler, trains a small multitask embedding network with
hand-verified gradients, fuses branch embeddings into unit-norm fixed
templates, and runs exhaustive 1:N cosine search with verification and
identification evaluation.
"""

from fixedprint.errors import (
    DegenerateEmbeddingError,
    DomainError,
    FixedPrintError,
    FormatError,
    TrainingDivergedError,
    UnsupportedFarLevelError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateEmbeddingError",
    "DomainError",
    "FixedPrintError",
    "FormatError",
    "TrainingDivergedError",
    "UnsupportedFarLevelError",
    "ValidationError",
    "__version__",
]
