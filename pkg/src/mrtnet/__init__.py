"""Multi-resolution temporal network for video sentence grounding, on a numpy autodiff core."""

from .diffcore import Tensor, backward, check_gradients
from .model import Architecture, MRTNet

__all__ = ["Architecture", "MRTNet", "Tensor", "backward", "check_gradients"]
__version__ = "0.1.0"
