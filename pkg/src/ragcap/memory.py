"""External visual-name memory: an immutable flat store of (key, name) pairs.

Keys are kept as little-endian float32, exactly as persisted, so that a
save/load round trip is bit-exact. Norms and unit-normalised float64 copies are
derived on construction and never written to disk.
"""
from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyBlock,
    FormatError,
    InvalidRecord,
    IoError,
    NonFiniteValue,
    ZeroKey,
)
from .vecmath import as_block, as_vec, mean_embed, row_norms

MAGIC = b"EVCM"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_ENTRY_HEAD = struct.Struct("<BI")


class Source(enum.IntEnum):
    REAL = 0
    SYNTHETIC = 1
    UNSPECIFIED = 2

    @classmethod
    def parse(cls, value) -> "Source":
        if isinstance(value, Source):
            return value
        if value is None:
            return cls.UNSPECIFIED
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise InvalidRecord(f"unknown source {value!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class MemoryRecord:
    """One ingested image-name pair.

    Exactly one of ``embeddings`` (R x D raw per-image embeddings, mean-pooled
    at build time) or ``key`` (an already pooled D-vector) must be given.
    """

    name: str
    embeddings: np.ndarray | None = None
    key: np.ndarray | None = None
    source: Source = Source.UNSPECIFIED

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise InvalidRecord("record name must be a non-empty string")
        if (self.embeddings is None) == (self.key is None):
            raise InvalidRecord(f"record {self.name!r} needs exactly one of embeddings/key")
        object.__setattr__(self, "source", Source.parse(self.source))

    def pooled_key(self, dim: int | None = None) -> np.ndarray:
        if self.key is not None:
            return as_vec(self.key, dim)
        try:
            return mean_embed(as_block(self.embeddings, dim))
        except EmptyBlock:
            raise InvalidRecord(f"record {self.name!r} has no embedding rows") from None

    @classmethod
    def from_json(cls, obj: dict) -> "MemoryRecord":
        if not isinstance(obj, dict):
            raise InvalidRecord("record must be a JSON object")
        unknown = set(obj) - {"name", "source", "embeddings", "key"}
        if unknown:
            raise InvalidRecord(f"unknown record fields: {sorted(unknown)}")
        emb = obj.get("embeddings")
        key = obj.get("key")
        try:
            emb = None if emb is None else np.asarray(emb, dtype=np.float64)
            key = None if key is None else np.asarray(key, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise InvalidRecord(f"non-numeric vector data: {exc}") from None
        return cls(name=obj.get("name"), embeddings=emb, key=key, source=obj.get("source"))

    def to_json(self) -> dict:
        out = {"name": self.name, "source": self.source.label}
        if self.key is not None:
            out["key"] = np.asarray(self.key, dtype=np.float64).tolist()
        else:
            out["embeddings"] = np.asarray(self.embeddings, dtype=np.float64).tolist()
        return out


@dataclass(frozen=True)
class MemoryEntry:
    key: np.ndarray
    name: str
    norm: float
    source: Source
    insert_index: int


@dataclass(frozen=True)
class MemoryStats:
    count: int
    distinct_names: int
    dim: int
    per_source: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "count": self.count,
            "distinct_names": self.distinct_names,
            "dim": self.dim,
            "per_source": dict(self.per_source),
        }


class VisualNameMemory:
    """Immutable snapshot of the memory. Use :func:`build` / :func:`expand`."""

    def __init__(self, dim: int, keys: np.ndarray, names: Sequence[str], sources: Sequence[Source]):
        keys = np.ascontiguousarray(keys, dtype="<f4").reshape(-1, dim)
        if keys.shape[0] != len(names) or len(names) != len(sources):
            raise DimensionMismatch("keys, names and sources disagree in length")
        keys.setflags(write=False)
        self.dim = int(dim)
        self.keys = keys
        self.names = tuple(names)
        self.sources = tuple(Source(s) for s in sources)
        norms = row_norms(keys)
        if norms.size and not np.all(norms > 0.0):
            bad = int(np.flatnonzero(~(norms > 0.0))[0])
            raise ZeroKey(f"entry {bad} ({self.names[bad]!r}) has a zero-norm key")
        norms.setflags(write=False)
        self.norms = norms

    def __len__(self) -> int:
        return len(self.names)

    @property
    def count(self) -> int:
        return len(self.names)

    def entry(self, i: int) -> MemoryEntry:
        return MemoryEntry(
            key=self.keys[i], name=self.names[i], norm=float(self.norms[i]),
            source=self.sources[i], insert_index=i,
        )

    def __iter__(self) -> Iterator[MemoryEntry]:
        return (self.entry(i) for i in range(len(self)))

    @property
    def entries(self) -> list[MemoryEntry]:
        return list(self)

    @cached_property
    def unit_keys(self) -> np.ndarray:
        """Float64 keys scaled to unit length (the flat scan operand)."""
        u = self.keys.astype(np.float64) / self.norms[:, None]
        u.setflags(write=False)
        return u

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def stats(self) -> MemoryStats:
        return stats(self)

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, self.dim, len(self))]
        for name, src, key in zip(self.names, self.sources, self.keys):
            raw = name.encode("utf-8")
            parts.append(_ENTRY_HEAD.pack(int(src), len(raw)))
            parts.append(raw)
            parts.append(key.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VisualNameMemory":
        view = memoryview(data)
        if len(view) < _HEADER.size:
            raise FormatError(f"truncated header: {len(view)} bytes")
        magic, version, dim, count = _HEADER.unpack_from(view, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if dim == 0:
            raise FormatError("dimension must be positive")
        key_bytes = 4 * dim
        if count * (_ENTRY_HEAD.size + key_bytes) > len(view) - _HEADER.size:
            raise FormatError(f"truncated file: header claims {count} entries")
        off = _HEADER.size
        names, sources = [], []
        keys = np.empty((count, dim), dtype="<f4")
        for i in range(count):
            if off + _ENTRY_HEAD.size > len(view):
                raise FormatError(f"truncated at entry {i}")
            tag, nlen = _ENTRY_HEAD.unpack_from(view, off)
            off += _ENTRY_HEAD.size
            if tag not in Source._value2member_map_:
                raise FormatError(f"entry {i}: unknown source tag {tag}")
            if off + nlen + key_bytes > len(view):
                raise FormatError(f"truncated at entry {i}")
            try:
                name = bytes(view[off:off + nlen]).decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"entry {i}: name is not valid UTF-8") from None
            if not name.strip():
                raise FormatError(f"entry {i}: empty name")
            off += nlen
            keys[i] = np.frombuffer(view[off:off + key_bytes], dtype="<f4")
            off += key_bytes
            names.append(name)
            sources.append(Source(tag))
        if off != len(view):
            raise FormatError(f"{len(view) - off} trailing bytes after last entry")
        if not np.all(np.isfinite(keys)):
            raise FormatError("non-finite key values")
        try:
            return cls(dim, keys, names, sources)
        except ZeroKey as exc:
            raise FormatError(str(exc)) from None


def _pool_records(records: Iterable[MemoryRecord], dim: int):
    keys, names, sources = [], [], []
    for pos, rec in enumerate(records):
        if not isinstance(rec, MemoryRecord):
            rec = MemoryRecord.from_json(rec)
        try:
            key = rec.pooled_key(dim)
        except DimensionMismatch as exc:
            raise DimensionMismatch(f"record {pos} ({rec.name!r}): {exc}") from None
        keys.append(key)
        names.append(rec.name.strip())
        sources.append(rec.source)
    if not keys:
        return np.empty((0, dim), dtype="<f4"), names, sources
    k64 = np.stack(keys)
    k32 = k64.astype("<f4")
    if not np.all(np.isfinite(k32)):
        raise NonFiniteValue("pooled key overflows float32")
    zero = np.flatnonzero(~np.any(k32 != 0, axis=1))
    if zero.size:
        i = int(zero[0])
        raise ZeroKey(f"record {i} ({names[i]!r}) pools to a zero-norm key")
    return k32, names, sources


def build(records: Iterable[MemoryRecord], dim: int) -> VisualNameMemory:
    """Build a memory with one entry per record, in record order."""
    if dim <= 0:
        raise DimensionMismatch("dimension must be positive")
    keys, names, sources = _pool_records(records, dim)
    return VisualNameMemory(dim, keys, names, sources)


def expand(mem: VisualNameMemory, records: Iterable[MemoryRecord]) -> VisualNameMemory:
    """Return a new snapshot with ``records`` appended; ``mem`` is left untouched."""
    keys, names, sources = _pool_records(records, mem.dim)
    if not names:
        return VisualNameMemory(mem.dim, mem.keys, mem.names, mem.sources)
    return VisualNameMemory(
        mem.dim,
        np.concatenate([mem.keys, keys]),
        mem.names + tuple(names),
        mem.sources + tuple(sources),
    )


def stats(mem: VisualNameMemory) -> MemoryStats:
    per_source = Counter(s.label for s in mem.sources)
    return MemoryStats(
        count=len(mem),
        distinct_names=len(set(mem.names)),
        dim=mem.dim,
        per_source={s.label: per_source.get(s.label, 0) for s in Source},
    )


def save(mem: VisualNameMemory, path) -> None:
    data = mem.to_bytes()
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".evcm-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write memory to {path}: {exc}") from exc


def load(path) -> VisualNameMemory:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read memory from {path}: {exc}") from exc
    return VisualNameMemory.from_bytes(data)


def read_records(path) -> list[MemoryRecord]:
    """Parse a JSON-lines ingestion file (blank lines skipped)."""
    records = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read records from {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidRecord(f"{path}:{lineno}: {exc}") from None
            try:
                records.append(MemoryRecord.from_json(obj))
            except InvalidRecord as exc:
                raise InvalidRecord(f"{path}:{lineno}: {exc}") from None
    return records
