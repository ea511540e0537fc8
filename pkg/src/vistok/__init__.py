"""vistok: a desk-scale joint image and video tokenizer with generation heads."""

from vistok.errors import (
    ConfigError,
    FormatError,
    NumericFault,
    ShapeError,
    VistokError,
)
from vistok.tensor import Tensor, check_gradient, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "check_gradient",
    "no_grad",
    "VistokError",
    "ShapeError",
    "NumericFault",
    "ConfigError",
    "FormatError",
    "__version__",
]
