"""Chunked, cached multi-exposure fusion network on a small numpy autodiff core."""

from .tensor import Tensor, ShapeError

__all__ = ["Tensor", "ShapeError"]
__version__ = "0.1.0"
