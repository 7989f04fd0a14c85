"""Deterministic pseudo image encoder and the feature-file format.

Stands in for a frozen vision encoder: an image identifier is hashed
(FNV-1a 64) together with the seed, and splitmix64 expands that state into a
32 x D block of values in [-1, 1). Only integer arithmetic and exact float
scaling are involved, so the output is bit-identical on every platform.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidRecord, IoError, RagcapError
from .vecmath import as_block

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def splitmix64(state: int, counters: np.ndarray) -> np.ndarray:
    """splitmix64 outputs for ``state`` at the given stream positions."""
    with np.errstate(over="ignore"):
        z = np.uint64(state) + (counters.astype(np.uint64) + np.uint64(1)) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def uniform_signed(bits: np.ndarray) -> np.ndarray:
    """Top 53 bits -> exact float64 in [-1, 1)."""
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-52 - 1.0


@dataclass(frozen=True)
class PseudoEncoder:
    seed: int = 0
    dim: int = 768
    rows: int = 32

    def state(self, image_id: str) -> int:
        return fnv1a64(image_id.encode("utf-8")) ^ ((self.seed * 0x9E3779B97F4A7C15) & _MASK)

    def encode(self, image_id: str) -> np.ndarray:
        if not image_id:
            raise ValueError("image id must be non-empty")
        state = self.state(image_id)
        n = self.rows * self.dim
        block = uniform_signed(splitmix64(state, np.arange(n, dtype=np.uint64))).reshape(self.rows, self.dim)
        attempt = 1
        # an all-zero row needs every draw to hit exactly 2**52; redraw it from a later stream window
        while True:
            zero = np.flatnonzero(~np.any(block != 0.0, axis=1))
            if not zero.size:
                return block
            for r in zero:
                start = n * attempt + r * self.dim
                block[r] = uniform_signed(splitmix64(state, np.arange(start, start + self.dim, dtype=np.uint64)))
            attempt += 1


def pseudo_encode(image_id: str, enc: PseudoEncoder) -> np.ndarray:
    return enc.encode(image_id)


def read_features(path, dim: int | None = None, rows: int = 32) -> list[tuple[str, np.ndarray]]:
    """Read a feature file: JSON lines ``{"id": str, "features": [[...] x 32]}``."""
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read features from {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                block = as_block(obj["features"], dim)
                image_id = str(obj["id"])
            except RagcapError as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from None
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InvalidRecord(f"{path}:{lineno}: {exc}") from None
            if block.shape[0] != rows:
                raise DimensionMismatch(f"{path}:{lineno}: expected {rows} rows, got {block.shape[0]}")
            out.append((image_id, block))
    return out


def write_features(path, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, block in items:
            fh.write(json.dumps({"id": image_id, "features": np.asarray(block).tolist()}) + "\n")
