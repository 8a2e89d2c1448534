from .tensor import Tensor, no_grad
from .layers import Module
from .optim import Adam
from .models import (
    ClassifierHead,
    ConvEncoder,
    LinearHead,
    ProjectionHead,
    TinyEncoder,
    build_encoder,
)
from .serialize import load_checkpoint, save_checkpoint, weights_hash

__all__ = [
    "Tensor",
    "no_grad",
    "Module",
    "Adam",
    "ClassifierHead",
    "ConvEncoder",
    "LinearHead",
    "ProjectionHead",
    "TinyEncoder",
    "build_encoder",
    "load_checkpoint",
    "save_checkpoint",
    "weights_hash",
]
