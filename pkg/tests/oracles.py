"""Independent reference implementations used only by the tests.

Nothing here imports the package. Each oracle is written the slow, obvious way
so that a disagreement points at the fast code.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64_int(seed: int, count: int) -> list[int]:
    """Reference splitmix64 on Python integers."""
    out, state = [], seed & MASK64
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def naive_matmul(a, b) -> np.ndarray:
    """Triple loop with a float32 rounding after every multiply and add."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float32)
    for i in range(n):
        for j in range(m):
            acc = np.float32(a[i, 0] * b[0, j]) if k else np.float32(0)
            for t in range(1, k):
                acc = np.float32(acc + np.float32(a[i, t] * b[t, j]))
            out[i, j] = acc
    return out


def naive_rmsnorm(x, gamma, eps=1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    out = np.empty_like(x)
    for i, row in enumerate(x.reshape(-1, x.shape[-1])):
        acc = np.float32(0)
        for v in row:
            acc = np.float32(acc + np.float32(v * v))
        rms = np.sqrt(np.float32(np.float32(acc / np.float32(len(row))) + np.float32(eps)))
        out.reshape(-1, x.shape[-1])[i] = (row / rms) * np.asarray(gamma, dtype=np.float32)
    return out


def jacobi_singular_values(m, sweeps: int = 60, tol: float = 1e-15) -> np.ndarray:
    """One-sided Jacobi SVD (Hestenes) in float64; returns sigmas descending."""
    a = np.array(m, dtype=np.float64)
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    n = a.shape[1]
    for _ in range(sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(a[:, p] @ a[:, p])
                beta = float(a[:, q] @ a[:, q])
                gamma = float(a[:, p] @ a[:, q])
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ap = a[:, p].copy()
                a[:, p] = c * ap - s * a[:, q]
                a[:, q] = s * ap + c * a[:, q]
        if not rotated:
            break
    return np.sort(np.linalg.norm(a, axis=0))[::-1]


def naive_attention_row(q, keys, values, scale) -> np.ndarray:
    """Softmax attention for one query vector over the given keys, in float64."""
    scores = np.array([float(np.dot(q, k)) * scale for k in keys])
    w = np.exp(scores - scores.max())
    w /= w.sum()
    return (w[:, None] * np.asarray(values, dtype=np.float64)).sum(axis=0)
