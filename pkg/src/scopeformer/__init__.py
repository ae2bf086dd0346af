"""Desk-scale n-CNN-ViT for multi-label CT hemorrhage classification."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, grad_check, no_grad  # noqa: F401
from .backbone import BackboneConfig, EnsembleConfig, StageSpec  # noqa: F401
from .vit import ViTConfig  # noqa: F401
from .model import ScopeformerModel  # noqa: F401
from .config import RunConfig, load_config, parse_config  # noqa: F401
