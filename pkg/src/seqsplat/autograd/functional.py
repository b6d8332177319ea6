"""Attention and the training losses, built on the tensor ops."""
from __future__ import annotations

import numpy as np

from .tensor import (ShapeError, Tensor, _make, _sigmoid_np, _wrap, add, log_softmax,
                     matmul, mul, sigmoid, softmax, sum_, transpose)

# additive mask value standing in for -inf
NEG_INF = -1e9


def attention(q, k, v, mask=None):
    """softmax(q kᵀ / sqrt(d_k) + mask) v for 2-D (or leading-batched) inputs."""
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not agree")
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, np.asarray(mask, dtype=np.float64))
    return matmul(softmax(scores, axis=-1), v)


def _sorted_sum(x, axis):
    # summing in sorted order makes the result independent of element order
    return np.sort(x, axis=axis).sum(axis=axis)


def set_pool(weights, values):
    """Weighted sum over a set: (T, N) weights, (N, d) values -> (T, d).

    Unlike ``matmul`` the reduction over N is bitwise invariant to permuting
    the set, which keeps set-level modules exactly permutation equivariant.
    """
    weights, values = _wrap(weights), _wrap(values)
    w, v = weights.data, values.data
    if w.ndim != 2 or v.ndim != 2 or w.shape[1] != v.shape[0]:
        raise ShapeError(f"set_pool: weights {w.shape} vs values {v.shape}")
    out = _sorted_sum(w[:, :, None] * v[None, :, :], axis=1)
    return _make(out, (weights, values), lambda g: (g @ v.T, w.T @ g), "set_pool")


def set_softmax(a):
    """Softmax over the last axis with an order-independent denominator."""
    a = _wrap(a)
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = e / _sorted_sum(e, axis=-1)[..., None]

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "set_softmax")


def set_attention(q, k, v):
    """Attention of (T, d) queries over a set of (N, d) keys and values.

    Matches ``attention`` up to rounding, and its output is bitwise unchanged
    when the rows of ``k`` and ``v`` are permuted together.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.ndim != 2 or q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"set_attention: q {q.shape}, k {k.shape}, v {v.shape} do not agree")
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    return set_pool(set_softmax(scores), v)


def causal_mask(n):
    return np.triu(np.full((n, n), NEG_INF), k=1)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy in the softplus form."""
    logits = _wrap(logits)
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if x.shape != t.shape:
        raise ShapeError(f"bce_with_logits: logits {x.shape} vs targets {t.shape}")
    n = x.size
    softplus = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = np.mean(softplus - t * x)
    s = _sigmoid_np(x)
    return _make(out, (logits,), lambda g: (g * (s - t) / n,), "bce")


def dice_loss(probs, targets, eps=1.0):
    probs = _wrap(probs)
    t = np.asarray(targets, dtype=np.float64)
    if probs.shape != t.shape:
        raise ShapeError(f"dice_loss: probs {probs.shape} vs targets {t.shape}")
    inter = sum_(mul(probs, t))
    denom = add(sum_(probs), float(t.sum()) + eps)
    return 1.0 - (inter * 2.0 + eps) / denom


def cross_entropy(logits, target_ids, ignore_id=-100):
    """Mean token NLL over positions whose target is not ``ignore_id``."""
    logits = _wrap(logits)
    ids = np.asarray(target_ids, dtype=np.int64)
    if logits.ndim != 2 or ids.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {ids.shape}")
    keep = np.flatnonzero(ids != ignore_id)
    if keep.size == 0:
        raise ValueError("cross_entropy: no positions left after ignore_id")
    if ids[keep].max() >= logits.shape[1] or ids[keep].min() < 0:
        raise ShapeError("cross_entropy: target id outside vocabulary")
    lp = log_softmax(logits, axis=-1)
    picked = lp[keep, ids[keep]]
    return sum_(picked) * (-1.0 / keep.size)


def mask_probs(logits):
    return sigmoid(logits)
