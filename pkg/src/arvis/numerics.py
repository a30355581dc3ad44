"""Deterministic float32 tensor primitives with hand-written backward passes.

Tensors are plain 2-D numpy arrays (row-major, float32 by default); gradients
are arrays of the same shape and accumulate additively. There is no autodiff
graph: every primitive exposes an explicit backward function, each of which is
checked against central finite differences in the test suite. All ops preserve
the dtype of their inputs so the same code paths can be finite-difference
tested in float64.

A module-level FLOP counter tallies matmul work (2*m*k*n per product); the
decoding benchmarks use it to separate O(N) from O(N^2) growth.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericsError, ParameterError

DTYPE = np.float32

_flops = 0


def reset_flops() -> None:
    global _flops
    _flops = 0


def flop_count() -> int:
    return _flops


def add_flops(n: int) -> None:
    global _flops
    _flops += int(n)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"{what} contains non-finite values")
    return x


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product a @ b with FLOP accounting."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    add_flops(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, d_out: np.ndarray):
    """Gradients of c = a @ b given upstream d_out."""
    if d_out.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(f"matmul backward shape mismatch: {d_out.shape}")
    da = matmul(d_out, b.T)
    db = matmul(a.T, d_out)
    return da, db


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax of a vector at the given temperature (> 0)."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    v = np.asarray(v)
    if v.ndim != 1:
        raise DimensionError("softmax expects a vector")
    z = v / v.dtype.type(temperature)
    z = z - np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def softmax_backward(y: np.ndarray, d_out: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Gradient wrt the input vector, given the forward output y."""
    dot = np.sum(d_out * y)
    return (y * (d_out - dot)) / y.dtype.type(temperature)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for matrices. -inf rows of masked scores are fine."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# rms_norm
# ---------------------------------------------------------------------------

RMS_EPS = 1e-6


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """y_i = gain_i * x_i / sqrt(mean(x^2) + 1e-6)."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] == 0:
        raise DimensionError("rms_norm expects a non-empty vector")
    if gain.shape != x.shape:
        raise DimensionError(f"rms_norm gain shape {gain.shape} != input shape {x.shape}")
    inv = 1.0 / np.sqrt(np.mean(x * x) + x.dtype.type(RMS_EPS))
    return gain * x * inv


def rms_norm_rows(x: np.ndarray, gain: np.ndarray):
    """Row-wise rms_norm; returns (y, inv_rms) with inv_rms kept for backward."""
    if x.shape[-1] != gain.shape[0]:
        raise DimensionError(f"rms_norm gain length {gain.shape[0]} != row width {x.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(RMS_EPS))
    return x * inv * gain, inv


def rms_norm_rows_backward(x: np.ndarray, gain: np.ndarray, inv: np.ndarray, d_out: np.ndarray):
    """Gradients (dx, dgain) for rms_norm_rows."""
    n = x.shape[-1]
    dg = np.sum(d_out * x * inv, axis=0)
    dyg = d_out * gain
    dot = np.sum(dyg * x, axis=-1, keepdims=True)
    dx = dyg * inv - x * (inv ** 3) * (dot / n)
    return dx, dg


def rms_norm_backward(x: np.ndarray, gain: np.ndarray, d_out: np.ndarray):
    """Vector form of the rms_norm gradient, for the public 1-D op."""
    inv = 1.0 / np.sqrt(np.mean(x * x) + x.dtype.type(RMS_EPS))
    dx, dg = rms_norm_rows_backward(x[None, :], gain, np.array([[inv]], dtype=x.dtype), d_out[None, :])
    return dx[0], dg


# ---------------------------------------------------------------------------
# silu (gated feed-forward activation)
# ---------------------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return d_out * s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# causal attention (single head)
# ---------------------------------------------------------------------------

def causal_attention_with_tape(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Single-head causal attention over a full sequence.

    q, k, v are (T, head_dim). Position i attends to positions <= i; scores are
    scaled by 1/sqrt(head_dim). Returns (out, probs) where probs is the (T, T)
    attention matrix retained for the backward pass.
    """
    if q.ndim != 2 or q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"attention expects equal (T, d) shapes, got {q.shape}, {k.shape}, {v.shape}")
    t, d = q.shape
    scale = 1.0 / np.sqrt(np.asarray(d, dtype=q.dtype))
    scores = matmul(q, k.T) * scale
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(mask, np.asarray(-np.inf, dtype=q.dtype), scores)
    probs = softmax_rows(scores)
    out = matmul(probs, v)
    return out, probs


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    out, _ = causal_attention_with_tape(q, k, v)
    return out


def causal_attention_backward(q, k, v, probs, d_out):
    """Gradients (dq, dk, dv) given the saved attention probabilities."""
    d = q.shape[1]
    scale = 1.0 / np.sqrt(np.asarray(d, dtype=q.dtype))
    dv = matmul(probs.T, d_out)
    dp = matmul(d_out, v.T)
    # softmax rows backward; masked entries have probs == 0 so they drop out
    ds = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True))
    dq = matmul(ds, k) * scale
    dk = matmul(ds.T, q) * scale
    return dq, dk, dv


def context_attention(q: np.ndarray, k_ctx: np.ndarray, v_ctx: np.ndarray, n_prefix: int) -> np.ndarray:
    """Attention for n new rows against a context of cached + new keys.

    q is (n, d); k_ctx/v_ctx are (C + n, d) where the first C = n_prefix rows
    are cached history. New row i attends to positions <= n_prefix + i.
    """
    n, d = q.shape
    total = k_ctx.shape[0]
    scale = 1.0 / np.sqrt(np.asarray(d, dtype=q.dtype))
    scores = matmul(q, k_ctx.T) * scale
    if n > 1:
        cols = np.arange(total)[None, :]
        rows = np.arange(n)[:, None]
        scores = np.where(cols > rows + n_prefix, np.asarray(-np.inf, dtype=q.dtype), scores)
    probs = softmax_rows(scores)
    return matmul(probs, v_ctx)


# ---------------------------------------------------------------------------
# embedding lookup
# ---------------------------------------------------------------------------

def embedding_rows(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Gather embedding rows for a vector of token ids."""
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise DimensionError("embedding id out of range")
    return table[ids]


def embedding_backward(ids: np.ndarray, d_out: np.ndarray, vocab: int) -> np.ndarray:
    """Scatter-add gradient into a (vocab, dim) table."""
    grad = np.zeros((vocab, d_out.shape[1]), dtype=d_out.dtype)
    np.add.at(grad, np.asarray(ids), d_out)
    return grad
