"""Abdominal trauma detection pipeline on synthetic CT phantoms.

Phantom generation, preprocessing into 2.5D slice triplets, 3D organ
segmentation, a CNN + GRU slice-sequence classifier with auxiliary Dice
heads, ensembling and the weighted multi-group log-loss score.
"""

from abdtrauma.errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    DegenerateMaskError,
    NumericError,
    StorageError,
)
from abdtrauma.schema import LabelGroup, LabelSchema, default_schema

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DegenerateInputError",
    "DegenerateMaskError",
    "NumericError",
    "StorageError",
    "LabelGroup",
    "LabelSchema",
    "default_schema",
    "__version__",
]
