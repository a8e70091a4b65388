"""Few-shot semantic segmentation with symmetric prototype alignment."""

from .tensor import (Tensor, NonFiniteError, AutodiffError, no_grad,
                     set_default_dtype, get_default_dtype, eps_norm)

__version__ = "0.1.0"
