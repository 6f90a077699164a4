"""Three-level structured feature network for continuous gesture recognition."""

from .tensor import Tensor, ShapeError, no_grad

__all__ = ["Tensor", "ShapeError", "no_grad"]
__version__ = "0.1.0"
