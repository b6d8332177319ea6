"""Parameters, modules and the standard layers."""
from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, add, embedding_lookup, gelu, layer_norm, matmul


def rng_stream(seed, name):
    """Independent generator for one named consumer (init, dropout, sampling...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Parameter container; submodules and parameters are found via attributes."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Parameter):
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state, strict=True):
        params = self.named_parameters()
        missing = [k for k in params if k not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in params.items():
            if k not in state:
                continue
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        # N(0, 1/fan_in) weights, zero bias
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n, d, rng):
        self.table = Parameter(rng.normal(0.0, 0.02, size=(n, d)))

    def __call__(self, ids):
        return embedding_lookup(self.table, ids)


class MLP(Module):
    """Linear layers with GELU in between (none after the last)."""

    def __init__(self, widths, rng):
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x
