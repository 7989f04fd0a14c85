"""Top-K object-name retrieval against a :class:`VisualNameMemory`.

Each query row picks its single most similar memory key; candidates sharing a
name collapse to the best-scoring one; the K best distinct names are returned
in descending score order.

Scores are rounded to ``SCORE_DECIMALS`` places before any comparison. This
makes ties exact: two keys that differ only by float rounding noise (identical
keys, or a key and a positive multiple of it) compare equal and fall through to
the index tie-breakers instead of being decided by the last ulp of a BLAS sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyMemory
from .memory import VisualNameMemory
from .vecmath import as_block, cosine_matrix

SCORE_DECIMALS = 12
DEFAULT_K = 10


@dataclass(frozen=True)
class Candidate:
    query_index: int
    entry_index: int
    name: str
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    names: tuple[tuple[str, float], ...]
    k_requested: int

    @property
    def labels(self) -> list[str]:
        return [n for n, _ in self.names]

    def __len__(self) -> int:
        return len(self.names)

    def as_json(self) -> dict:
        return {"names": [{"name": n, "score": s} for n, s in self.names]}


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = DEFAULT_K

    def __post_init__(self):
        if int(self.k) < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")


def canonical_scores(sims: np.ndarray) -> np.ndarray:
    return np.round(sims, SCORE_DECIMALS)


def similarity_matrix(queries, mem: VisualNameMemory) -> np.ndarray:
    """R x M matrix of canonical (clamped, rounded) cosine scores."""
    if len(mem) == 0:
        raise EmptyMemory("cannot retrieve from an empty memory")
    q = as_block(queries)
    if q.shape[1] != mem.dim:
        raise DimensionMismatch(f"query width {q.shape[1]} != memory dim {mem.dim}")
    return canonical_scores(cosine_matrix(q, mem.unit_keys, np.ones(len(mem))))


def best_key_per_query(queries, mem: VisualNameMemory) -> list[Candidate]:
    """One candidate per query row: the most similar key, lowest index on ties."""
    sims = similarity_matrix(queries, mem)
    best = np.argmax(sims, axis=1)  # first maximum == smallest insert_index
    return [
        Candidate(j, int(i), mem.names[i], float(sims[j, i]))
        for j, i in enumerate(best)
    ]


def dedup_and_topk(cands, k: int) -> RetrievalResult:
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    ranked = sorted(cands, key=lambda c: (-c.score, c.entry_index, c.query_index))
    seen: set[str] = set()
    out = []
    for c in ranked:
        if len(out) == k:
            break
        if c.name in seen:
            continue
        seen.add(c.name)
        out.append((c.name, c.score))
    return RetrievalResult(tuple(out), k)


def retrieve_names(queries, mem: VisualNameMemory, cfg: RetrievalConfig | int = DEFAULT_K) -> RetrievalResult:
    k = cfg.k if isinstance(cfg, RetrievalConfig) else int(cfg)
    return dedup_and_topk(best_key_per_query(queries, mem), k)
