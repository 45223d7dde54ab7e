"""Shared-attention transformer students: similarity analysis, construction, distillation, accounting."""
from .model import TINYLLAMA, ModelConfig, TransformerModel, build_student, count_parameters, removed_parameters
from .plan import SharingPlan
from .tensor import Tensor, backward, no_grad

__all__ = [
    "TINYLLAMA",
    "ModelConfig",
    "SharingPlan",
    "Tensor",
    "TransformerModel",
    "backward",
    "build_student",
    "count_parameters",
    "no_grad",
    "removed_parameters",
]
__version__ = "0.1.0"
