"""Deterministic float32 kernels shared by every code path.

Every reduction here accumulates strictly left to right (``np.add.accumulate``)
rather than through BLAS or numpy's pairwise summation. The result for one
output element therefore depends only on that element's inputs, never on the
batch it was computed in. Cached and recomputed K/V, batched and incremental
decoding, all go through these functions and agree bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

DTYPE = np.float32


def _seq_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum along ``axis`` in ascending index order."""
    if x.shape[axis] == 0:
        shape = list(x.shape)
        del shape[axis]
        return np.zeros(shape, dtype=x.dtype)
    acc = np.add.accumulate(x, axis=axis, dtype=x.dtype)
    return np.take(acc, -1, axis=axis)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    ``out[..., i, j] = sum_k a[..., i, k] * b[..., k, j]`` where the sum runs
    over ``k = 0, 1, ...`` with a float32 rounding after every multiply and
    every add. Leading batch dimensions broadcast.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    k_dim = a.shape[-1]
    out_shape = np.broadcast_shapes(a.shape[:-1] + (1,), b.shape[:-2] + (1, b.shape[-1]))
    if k_dim == 0:
        return np.zeros(out_shape, dtype=DTYPE)
    # Both branches perform the identical sequence of float32 operations; the
    # choice is purely about speed.
    if int(np.prod(out_shape)) * k_dim <= _SMALL_PRODUCT:
        prod = a[..., :, :, None] * b[..., None, :, :]
        return _seq_sum(prod, axis=-2)
    out = a[..., :, 0:1] * b[..., 0:1, :]
    term = np.empty_like(out)
    for k in range(1, k_dim):
        np.multiply(a[..., :, k:k + 1], b[..., k:k + 1, :], out=term)
        np.add(out, term, out=out)
    return out


_SMALL_PRODUCT = 1 << 15


def rmsnorm(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Root-mean-square normalisation over the last axis, scaled by ``gamma``."""
    x = np.asarray(x, dtype=DTYPE)
    gamma = np.asarray(gamma, dtype=DTYPE)
    if x.shape[-1] != gamma.shape[-1] or gamma.ndim != 1:
        raise ValueError(f"length mismatch: x has {x.shape[-1]}, gamma has {gamma.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    d = x.shape[-1]
    mean_sq = _seq_sum(x * x, axis=-1) / DTYPE(d)
    rms = np.sqrt(mean_sq + DTYPE(eps))
    if np.any(rms == 0):
        raise ValueError("rmsnorm of an all-zero vector with eps=0 is undefined")
    return (x / rms[..., None]) * gamma


def softmax(scores: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.size == 0 or scores.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(scores)):
        raise ValueError("softmax needs finite scores")
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / _seq_sum(e, axis=-1)[..., None]


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the positions where ``mask`` is true; the rest get exactly 0.

    Masked entries are never exponentiated, so they contribute +0 to the
    running sum and leave it unchanged. A row restricted to keys ``0..p``
    therefore normalises identically whether or not later keys are present.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    mask = np.broadcast_to(mask, scores.shape)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("every query needs at least one visible key")
    neg = np.where(mask, scores, -np.inf)
    shifted = np.where(mask, scores - neg.max(axis=-1, keepdims=True), DTYPE(0))
    e = np.where(mask, np.exp(shifted), DTYPE(0))
    return e / _seq_sum(e, axis=-1)[..., None]


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return x / (DTYPE(1) + np.exp(-x))


def svd_singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values in descending order, computed in float64 by LAPACK."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return np.linalg.svd(m, compute_uv=False)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats.

    Terms with ``p_i == 0`` contribute nothing. Returns ``math.inf`` when some
    ``p_i > 0`` meets ``q_i == 0``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    ps, qs = p[support], q[support]
    total = float(np.sum(ps * (np.log(ps) - np.log(qs))))
    return max(total, 0.0)
