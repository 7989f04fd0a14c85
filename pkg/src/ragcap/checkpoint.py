"""Binary checkpoints for the fusion stack (EVCF) and the trainable set (EVCT).

Both follow the memory-file conventions: 4-byte magic, u32 version, then
little-endian fixed-width fields. Arrays are stored as float64 so a round trip
is bit-exact.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, IoError
from .fusion import FusionConfig
from .vocab import Vocab

FUSION_MAGIC = b"EVCF"
TRAINABLE_MAGIC = b"EVCT"
VERSION = 1


class _Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic, struct.pack("<I", VERSION)]

    def u32(self, *values):
        self.parts.append(struct.pack(f"<{len(values)}I", *values))

    def u64(self, *values):
        self.parts.append(struct.pack(f"<{len(values)}Q", *values))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def vocab(self, v: Vocab):
        self.u32(len(v))
        for tok in v.tokens:
            self.text(tok)

    def array(self, a: np.ndarray):
        self.parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        self.view = memoryview(data)
        self.off = 0
        head = self.take(4)
        if head != magic:
            raise FormatError(f"bad magic {head!r}, expected {magic!r}")
        (version,) = self.unpack("<I")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.view):
            raise FormatError(f"truncated file at byte {self.off}")
        out = bytes(self.view[self.off : self.off + n])
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("invalid UTF-8 string") from None

    def vocab(self) -> Vocab:
        (n,) = self.unpack("<I")
        if n > len(self.view):
            raise FormatError(f"implausible vocabulary size {n}")
        try:
            return Vocab([self.text() for _ in range(n)])
        except ValueError as exc:
            raise FormatError(f"bad vocabulary: {exc}") from None

    def array(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape))
        a = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(a)):
            raise FormatError("non-finite values in array")
        return a

    def finish(self):
        if self.off != len(self.view):
            raise FormatError(f"{len(self.view) - self.off} trailing bytes")


def _write_atomic(path, data: bytes) -> None:
    path = os.fspath(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".ckpt-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def fusion_to_bytes(cfg: FusionConfig, name_vocab: Vocab, decoder_vocab: Vocab, t_obj: np.ndarray) -> bytes:
    w = _Writer(FUSION_MAGIC)
    w.u32(cfg.d_model, cfg.p, cfg.n_blocks, cfg.n_heads, cfg.ffn_dim, cfg.encoder_dim)
    w.u64(cfg.seed)
    w.vocab(name_vocab)
    w.vocab(decoder_vocab)
    w.array(t_obj)
    return w.bytes()


def fusion_from_bytes(data: bytes):
    """Returns (FusionConfig, name vocab, decoder vocab, T_obj)."""
    r = _Reader(data, FUSION_MAGIC)
    d_model, p, n_blocks, n_heads, ffn_dim, encoder_dim = r.unpack("<6I")
    (seed,) = r.unpack("<Q")
    try:
        cfg = FusionConfig(d_model, p, n_blocks, n_heads, ffn_dim, encoder_dim, seed)
    except ValueError as exc:
        raise FormatError(f"bad fusion config: {exc}") from None
    name_vocab = r.vocab()
    decoder_vocab = r.vocab()
    t_obj = r.array(p, d_model)
    r.finish()
    return cfg, name_vocab, decoder_vocab, t_obj


TRAINABLE_ORDER = ("T_img", "T_obj", "phi.weight", "phi.bias")


def trainables_to_bytes(arrays: dict, m: dict, v: dict, step: int) -> bytes:
    """``arrays``/``m``/``v`` map the four trainable names to float64 arrays."""
    n_img, d_model = arrays["T_img"].shape
    p = arrays["T_obj"].shape[0]
    d_llm = arrays["phi.bias"].shape[0]
    w = _Writer(TRAINABLE_MAGIC)
    w.u32(n_img, d_model, p, d_llm)
    w.u64(step)
    for table in (arrays, m, v):
        for name in TRAINABLE_ORDER:
            w.array(table[name])
    return w.bytes()


def trainables_from_bytes(data: bytes):
    """Returns (arrays, m, v, step) with the same keys as :data:`TRAINABLE_ORDER`."""
    r = _Reader(data, TRAINABLE_MAGIC)
    n_img, d_model, p, d_llm = r.unpack("<4I")
    (step,) = r.unpack("<Q")
    shapes = {
        "T_img": (n_img, d_model),
        "T_obj": (p, d_model),
        "phi.weight": (d_model, d_llm),
        "phi.bias": (d_llm,),
    }
    if sum(int(np.prod(s)) for s in shapes.values()) * 8 * 3 > len(data):
        raise FormatError("truncated file: header shapes exceed file size")
    tables = [{name: r.array(*shapes[name]) for name in TRAINABLE_ORDER} for _ in range(3)]
    r.finish()
    return tables[0], tables[1], tables[2], step


def save_fusion(path, cfg, name_vocab, decoder_vocab, t_obj) -> None:
    _write_atomic(path, fusion_to_bytes(cfg, name_vocab, decoder_vocab, t_obj))


def load_fusion(path):
    return fusion_from_bytes(_read(path))


def save_trainables(path, trainables, optimizer=None) -> None:
    arrays = {p.name: p.value for p in trainables.params()}
    if optimizer is None:
        zeros = {k: np.zeros_like(a) for k, a in arrays.items()}
        data = trainables_to_bytes(arrays, zeros, zeros, 0)
    else:
        data = trainables_to_bytes(arrays, optimizer.m, optimizer.v, optimizer.step_count)
    _write_atomic(path, data)


def load_trainables(path):
    return trainables_from_bytes(_read(path))


def restore_trainables(trainables, arrays, optimizer=None, m=None, v=None, step=0) -> None:
    """Copy loaded arrays into an existing trainable set (and optimizer state)."""
    for p in trainables.params():
        p.assign(arrays[p.name])
    if optimizer is not None:
        optimizer.m = {k: np.array(a) for k, a in m.items()}
        optimizer.v = {k: np.array(a) for k, a in v.items()}
        optimizer.step_count = step
