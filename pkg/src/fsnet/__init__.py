"""fsnet: full-scale segmentation network with adaptive thresholding."""

from .model import ComplexityReport, FSNet, ModelConfig, count_flops, count_params
from .tensor import Tensor, backward, no_grad, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "ComplexityReport",
    "FSNet",
    "ModelConfig",
    "Tensor",
    "backward",
    "count_flops",
    "count_params",
    "no_grad",
    "set_default_dtype",
    "__version__",
]
