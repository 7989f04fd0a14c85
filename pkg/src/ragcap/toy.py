"""Synthetic corpora for demos and tests.

Object "images" are noisy copies of a per-name prototype, so retrieval over a
toy memory returns the objects actually present in a toy image.
"""
from __future__ import annotations

import itertools

import numpy as np

from .encoder import PseudoEncoder
from .memory import MemoryRecord, Source

TOY_OBJECTS = (
    "cat", "dog", "hot dog", "teddy bear", "bicycle", "umbrella",
    "pizza", "clock", "kite", "traffic light", "banana", "laptop",
)
N_ROWS = 32


def prototypes(names, dim: int, seed: int = 0) -> np.ndarray:
    enc = PseudoEncoder(seed=seed, dim=dim, rows=1)
    return np.stack([enc.encode(f"prototype:{n}")[0] for n in names])


def toy_memory_records(names=TOY_OBJECTS, dim: int = 32, seed: int = 0,
                       real_per_name: int = 3, synthetic_per_name: int = 5, noise: float = 0.3):
    rng = np.random.default_rng(seed)
    protos = prototypes(names, dim, seed)
    records = []
    for name, proto in zip(names, protos):
        for source, count in ((Source.REAL, real_per_name), (Source.SYNTHETIC, synthetic_per_name)):
            for _ in range(count):
                emb = proto + noise * rng.standard_normal((N_ROWS, dim))
                records.append(MemoryRecord(name, embeddings=emb, source=source))
    return records


def toy_captions(n: int = 20, names=TOY_OBJECTS, dim: int = 32, seed: int = 0, noise: float = 0.3):
    """``n`` (image id, 32 x dim features, caption) triples over distinct object pairs."""
    rng = np.random.default_rng(seed + 1)
    protos = dict(zip(names, prototypes(names, dim, seed)))
    pairs = list(itertools.permutations(names, 2))
    picks = rng.permutation(len(pairs))[:n]
    out = []
    for idx, pick in enumerate(picks):
        a, b = pairs[pick]
        feats = np.concatenate([
            protos[a] + noise * rng.standard_normal((N_ROWS // 2, dim)),
            protos[b] + noise * rng.standard_normal((N_ROWS // 2, dim)),
        ])
        out.append((f"toy-{idx:03d}", feats, f"a {a} next to a {b}"))
    return out


def catalog_records(dim: int = 16, seed: int = 0, n_names: int = 1203, n_real: int = 8581,
                        synthetic_per_name: int = 5) -> list[MemoryRecord]:
    """Pre-pooled records for a large catalogue: 1-10 real images per name plus synthetic ones."""
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, 11, n_names)
    while counts.sum() != n_real:
        i = int(rng.integers(n_names))
        if counts.sum() < n_real and counts[i] < 10:
            counts[i] += 1
        elif counts.sum() > n_real and counts[i] > 1:
            counts[i] -= 1
    names = [f"object_{i:04d}" for i in range(n_names)]
    return pooled_records(names, counts, Source.REAL, dim, rng) + pooled_records(
        names, np.full(n_names, synthetic_per_name), Source.SYNTHETIC, dim, rng
    )


def pooled_records(names, counts, source: Source, dim: int, rng: np.random.Generator) -> list[MemoryRecord]:
    idx = np.repeat(np.arange(len(names)), counts)
    keys = rng.standard_normal((len(idx), dim))
    return [MemoryRecord(names[i], key=k, source=source) for i, k in zip(idx, keys)]
