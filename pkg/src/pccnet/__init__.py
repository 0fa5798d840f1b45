"""Multi-task crowd counting built from scratch on a numpy autodiff core."""

from .errors import ContractError, FormatError, ShapeError, TrainingError
from .tensor import Tensor, grad_check, load_tensor, save_tensor

__all__ = [
    "ContractError",
    "FormatError",
    "ShapeError",
    "TrainingError",
    "Tensor",
    "grad_check",
    "load_tensor",
    "save_tensor",
]
