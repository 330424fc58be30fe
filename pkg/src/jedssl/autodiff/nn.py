"""Composite building blocks assembled from the primitives."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, masked_fill, matmul, softmax, transpose

NEG_INF = -1e9


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` is boolean, broadcastable to (..., Tq, Tk), true where attention
    is blocked. Returns the output and the attention weights.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    scale = 1.0 / np.sqrt(q.shape[-1])
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, axes)) * scale
    if mask is not None:
        scores = masked_fill(scores, mask, NEG_INF)
    weights = softmax(scores)
    return matmul(weights, v), weights


def sinusoidal_positions(n: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : d - d // 2]
    return pe.astype(dtype)
