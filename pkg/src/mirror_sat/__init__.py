"""Dual-path symmetry-aware mirror segmentation on a small numpy autodiff core."""
from .model import ModelConfig, SATNet, satnet_forward
from .tensor import Tensor

__all__ = ["ModelConfig", "SATNet", "Tensor", "satnet_forward"]
__version__ = "0.1.0"
