"""Dense-vector primitives used by the memory and retrieval code.

All reductions run in float64 regardless of the storage dtype of the inputs.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, EmptyBlock, NonFiniteValue, ZeroVector


def as_vec(values, dim: int | None = None) -> np.ndarray:
    """Validate ``values`` as a finite 1-D vector and return it as float64."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue("vector contains NaN or Inf")
    return v


def as_block(rows, dim: int | None = None) -> np.ndarray:
    """Validate ``rows`` as a finite R x D feature block (R >= 1)."""
    b = np.asarray(rows, dtype=np.float64)
    if b.ndim != 2:
        if b.size == 0:
            raise EmptyBlock("feature block has no rows")
        raise DimensionMismatch(f"expected a 2-D block, got shape {b.shape}")
    if b.shape[0] == 0:
        raise EmptyBlock("feature block has no rows")
    if dim is not None and b.shape[1] != dim:
        raise DimensionMismatch(f"expected row width {dim}, got {b.shape[1]}")
    if not np.all(np.isfinite(b)):
        raise NonFiniteValue("feature block contains NaN or Inf")
    return b


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.dot(v, v)))


def cosine_sim(q, k) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Raises ZeroVector when either argument has zero norm.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape:
        raise DimensionMismatch(f"dimension mismatch: {q.shape} vs {k.shape}")
    nq = l2_norm(q)
    nk = l2_norm(k)
    if nq == 0.0:
        raise ZeroVector("query vector has zero norm")
    if nk == 0.0:
        raise ZeroVector("key vector has zero norm")
    s = float(np.dot(q, k)) / (nq * nk)
    return min(1.0, max(-1.0, s))


def mean_embed(block) -> np.ndarray:
    """Element-wise mean over the rows of a feature block.

    Computed as ``first row + mean of deviations``, which returns a block of
    identical rows exactly.
    """
    b = np.asarray(block, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] == 0:
        raise EmptyBlock("cannot average an empty block")
    return b[0] + (b - b[0]).mean(axis=0)


def row_norms(block) -> np.ndarray:
    b = np.asarray(block, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->i", b, b))


def cosine_matrix(queries, keys, key_norms=None) -> np.ndarray:
    """Dense R x M cosine-similarity matrix, clamped to [-1, 1].

    Zero query rows raise ZeroVector with the offending row index; zero keys
    are the caller's responsibility (the memory never stores them).
    """
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.shape[1] != k.shape[1]:
        raise DimensionMismatch(f"query width {q.shape[1]} != key width {k.shape[1]}")
    qn = row_norms(q)
    zero = np.flatnonzero(qn == 0.0)
    if zero.size:
        raise ZeroVector(f"query row {int(zero[0])} has zero norm", row=int(zero[0]))
    kn = row_norms(k) if key_norms is None else np.asarray(key_norms, dtype=np.float64)
    sims = (q / qn[:, None]) @ (k / kn[:, None]).T
    return np.clip(sims, -1.0, 1.0)
