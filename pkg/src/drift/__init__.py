"""Filter-ensemble defenses built on gradient disagreement.

A bank of small dimension-preserving filters sits in front of a frozen
classifier. Training pushes the filters' input gradients apart (low squared
cosine between pipelines) while keeping clean accuracy, so a perturbation
crafted against one pipeline transfers poorly to the others. The package
bundles the autodiff core, the models, the separation losses, the training
loop, a white/black-box attack suite, and the diagnostics used to check
that measured disagreement actually tracks reduced transfer.
"""

from .errors import (
    BudgetError, DivergenceError, DomainError, NonFiniteLoss, ShapeError,
    StageError, TapeError,
)

__all__ = [
    "BudgetError", "DivergenceError", "DomainError", "NonFiniteLoss",
    "ShapeError", "StageError", "TapeError",
]

__version__ = "0.1.0"
