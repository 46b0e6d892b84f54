"""Divide-and-Refine multimodal representation learning at desk scale."""

from dnr.errors import ContractViolation, NumericFault
from dnr.tensor import Tensor, backward, finite_diff_grad

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "NumericFault",
    "Tensor",
    "backward",
    "finite_diff_grad",
    "__version__",
]
