from . import ops
from .io import load_tensor, save_tensor
from .nn import Conv2d, Embedding, LayerNorm, Linear, Module, Parameter
from .ops import ConfigError, ShapeError
from .optim import AdamW, cosine_lr
from .tensor import NonFiniteError, Tensor, backward, no_grad

__all__ = [
    "AdamW", "ConfigError", "Conv2d", "Embedding", "LayerNorm", "Linear", "Module",
    "NonFiniteError", "Parameter", "ShapeError", "Tensor", "backward", "cosine_lr",
    "load_tensor", "no_grad", "ops", "save_tensor",
]
