"""ConViT: CNN backbone followed by two feature-map transformers, with a person branch and score fusion."""

from .branch import BoundingBox, BranchConfig, FusionWeights, HumanBranch, fuse_predictions, roi_pool, search_fusion_weights
from .model import ConViT, Heatmap, ModelConfig, channel_mean_heatmap, grad_cam
from .tensor import Tensor, backward, finite_diff_check, no_grad, tensor_create
from .train import TrainConfig, train, train_branch
from .vit import ModifiedViT, ViTConfig

__all__ = [
    "BoundingBox", "BranchConfig", "ConViT", "FusionWeights", "Heatmap", "HumanBranch", "ModelConfig",
    "ModifiedViT", "Tensor", "TrainConfig", "ViTConfig", "backward", "channel_mean_heatmap",
    "finite_diff_check", "fuse_predictions", "grad_cam", "no_grad", "roi_pool", "search_fusion_weights",
    "tensor_create", "train", "train_branch",
]
__version__ = "0.1.0"
