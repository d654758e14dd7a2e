"""Multi-stream guided-ViT face-forgery detector: five transformer streams
over a whole face and its quadrants, global-embedding guidance injection,
a quality-conditioned large-margin cosine loss, and graph-attention fusion,
plus the synthetic-corpus training and cross-quality evaluation harness.
"""

from .autodiff import Tensor, backward, finite_diff_check, forward_op, no_grad
from .model import GGViTParams, ModelConfig, ggvit_forward, ggvit_loss, make_config
from .preprocess import FaceBox, StreamSet, build_streams, expand_box, split_quadrants
from .trainer import TrainConfig, evaluate, train
from .vit import PRESETS, ViTConfig

__all__ = [
    "Tensor", "backward", "finite_diff_check", "forward_op", "no_grad",
    "GGViTParams", "ModelConfig", "ggvit_forward", "ggvit_loss", "make_config",
    "FaceBox", "StreamSet", "build_streams", "expand_box", "split_quadrants",
    "TrainConfig", "evaluate", "train", "PRESETS", "ViTConfig",
]

__version__ = "0.1.0"
