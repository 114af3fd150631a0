"""Small numeric kernels used throughout: softmax, cosine similarity, entropy,
median and seeded normal draws.

Matrices are plain float64 ``numpy.ndarray`` objects (row-major); the random
source is a ``numpy.random.Generator`` on PCG64.
"""

from __future__ import annotations

import numpy as np

LOG_EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) % 2**64))


def derive_seed(seed: int, *tags) -> int:
    """Deterministic sub-seed for a named phase (``derive_seed(7, "pretrain")``)."""
    ss = np.random.SeedSequence([int(seed) % 2**64, *[_tag_int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) % 2**32
    # stable across processes, unlike hash()
    return int.from_bytes(str(tag).encode("utf-8")[:8].ljust(8, b"\0"), "little") % 2**32


def softmax(v) -> np.ndarray:
    """Row-wise softmax; works on a single vector or a matrix of logits."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite values")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_distance(u, v) -> float:
    return 1.0 - cosine_similarity(u, v)


def shannon_entropy(p) -> float:
    """Natural-log entropy with the 0*log(0) = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probability vector has a negative entry")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def row_entropy(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < 0):
        raise ValueError("probability matrix has a negative entry")
    logs = np.log(np.where(P > 0, P, 1.0))
    return -(P * logs).sum(axis=1)


def median(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if xs.size == 0:
        raise ValueError("median of an empty list")
    return float(np.median(xs))


def sample_normal_clamped(rng: np.random.Generator, mean: float, std: float, n) -> np.ndarray:
    """Draw ``n`` values from Normal(mean, std) and clamp them into [0, 1].

    ``n`` may be a shape tuple.
    """
    if std < 0:
        raise ValueError("std must be non-negative")
    draws = rng.normal(mean, std, size=n) if std > 0 else np.full(n, float(mean))
    return np.clip(draws, 0.0, 1.0)


def xlogx_clamped(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``x*log(max(x, eps))`` and its derivative w.r.t. ``x``."""
    clipped = np.maximum(x, LOG_EPS)
    logs = np.log(clipped)
    return x * logs, logs + (x >= LOG_EPS)
