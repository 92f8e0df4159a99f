"""Dense kernels used by the encoder: matmul, masked softmax, layer norm, FFN.

Everything operates on numpy arrays in the dtype it is given (float32 for
inference, float64 inside training). Row-vector convention throughout:
``x @ W`` with ``W`` shaped ``(d_in, d_out)``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import AllMaskedRow, ShapeMismatch

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def masked_softmax_rows(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax of ``logits + mask``; masked positions come out as exact 0."""
    if logits.shape != mask.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs mask {mask.shape}")
    keep = mask == 0
    alive = keep.any(axis=1)
    if not alive.all():
        raise AllMaskedRow(int(np.flatnonzero(~alive)[0]))
    z = logits + mask
    row_max = np.max(np.where(keep, z, -np.inf), axis=1, keepdims=True)
    ex = np.where(keep, np.exp(np.where(keep, z - row_max, 0)), 0).astype(logits.dtype, copy=False)
    return ex / ex.sum(axis=1, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeMismatch(f"gain/bias must have length {x.shape[1]}")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def ffn_forward(x, w1, b1, w2, b2) -> np.ndarray:
    if w1.shape[0] != x.shape[1] or b1.shape != (w1.shape[1],):
        raise ShapeMismatch(f"first FFN layer {w1.shape}/{b1.shape} does not fit input {x.shape}")
    if w2.shape[0] != w1.shape[1] or b2.shape != (w2.shape[1],):
        raise ShapeMismatch(f"second FFN layer {w2.shape}/{b2.shape} does not chain")
    return matmul(gelu(matmul(x, w1) + b1), w2) + b2


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1, norms)
