"""Modality-agnostic image/video/RGBD classification with a shared
windowed-attention trunk, joint multi-dataset training, and cross-modal
k-NN retrieval over the learned feature space."""

from .patch_embed import IMAGE, RGBD, VIDEO, PatchSpec, TokenGrid, VisualSample
from .tensor import Parameter, Tensor
from .trunk import TrunkConfig

__version__ = "0.1.0"

__all__ = [
    "IMAGE", "VIDEO", "RGBD",
    "Tensor", "Parameter",
    "VisualSample", "PatchSpec", "TokenGrid", "TrunkConfig",
    "__version__",
]
