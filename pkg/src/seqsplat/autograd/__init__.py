"""Minimal reverse-mode autodiff over numpy float64 arrays."""
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (NEG_INF, attention, bce_with_logits, causal_mask, cross_entropy,
                         dice_loss, set_attention, set_pool, set_softmax)
from .nn import MLP, Embedding, LayerNorm, Linear, Module, Parameter, rng_stream
from .optim import Adam, AdamState, adam_step, cosine_lr
from .tensor import (NonFiniteError, ShapeError, Tensor, add, broadcast_to, concat, div,
                     dropout, embedding_lookup, exp, gelu, layer_norm, log, log_softmax,
                     matmul, max_, mean, mul, relu, reshape, set_debug, sigmoid, slice_,
                     softmax, sqrt, sub, sum_, tensor, transpose)

__all__ = [
    "Adam", "AdamState", "Embedding", "LayerNorm", "Linear", "MLP", "Module", "NEG_INF",
    "NonFiniteError", "Parameter", "ShapeError", "Tensor", "adam_step", "add", "attention",
    "bce_with_logits", "broadcast_to", "causal_mask", "concat", "cosine_lr", "cross_entropy",
    "dice_loss", "div", "dropout", "embedding_lookup", "exp", "gelu", "layer_norm",
    "load_checkpoint", "log", "log_softmax", "matmul", "max_", "mean", "mul", "relu",
    "reshape", "rng_stream", "save_checkpoint", "set_attention", "set_debug", "set_pool",
    "set_softmax", "sigmoid", "slice_", "softmax",
    "sqrt", "sub", "sum_", "tensor", "transpose",
]
