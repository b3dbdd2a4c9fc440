"""SONA-Net: second-order non-local attention for person re-identification,
built on a small numpy autodiff engine."""

from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["ContractError", "NumericError", "ShapeError", "Tensor", "grad_check", "no_grad", "__version__"]
