from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    GELU,
    LayerNorm,
    Linear,
    Module,
    NonFiniteError,
    Param,
    SelfAttention,
    Sigmoid,
    Softmax,
    Tanh,
    gelu,
    softmax,
)
from .losses import cross_entropy, l1_loss
from .optim import Adam, adam_step, cosine_decay, step_decay

__all__ = [
    "Adam",
    "GELU",
    "LayerNorm",
    "Linear",
    "Module",
    "NonFiniteError",
    "Param",
    "SelfAttention",
    "Sigmoid",
    "Softmax",
    "Tanh",
    "adam_step",
    "cosine_decay",
    "cross_entropy",
    "gelu",
    "l1_loss",
    "load_checkpoint",
    "save_checkpoint",
    "softmax",
    "step_decay",
]
