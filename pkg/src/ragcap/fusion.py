"""Attentive fusion of retrieved object names with visual features.

A small frozen cross-attention transformer with the input ports swapped
relative to an image Q-Former: the self-attention stream is
``[T_obj ; Q]`` (trainable object-name query tokens followed by the 32 visual
feature rows) and the cross-attention blocks read keys/values from the
embedded name sequence ``S = v1 [SEP] v2 [SEP] ... vK``. The fused name
features are the output states at the ``P`` query-token positions.

Blocks are post-LN (BERT style). Cross-attention sits in even-indexed blocks;
when ``S`` is empty it is skipped and the block reduces to the residual path.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ShapeMismatch, StaleCache
from .retrieval import RetrievalResult
from .vocab import SEP, Vocab, normalize

N_QUERIES = 32


@dataclass(frozen=True)
class FusionConfig:
    d_model: int = 768
    p: int = 8
    n_blocks: int = 2
    n_heads: int = 2
    ffn_dim: int = 0  # 0 -> 4 * d_model
    encoder_dim: int = 0  # 0 -> d_model (no width adapter)
    seed: int = 0

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")

    @property
    def hidden(self) -> int:
        return self.ffn_dim or 4 * self.d_model

    @property
    def in_dim(self) -> int:
        return self.encoder_dim or self.d_model


@dataclass(frozen=True)
class NameSequence:
    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]  # [start, end) of each name

    def __len__(self) -> int:
        return len(self.ids)


class Param:
    """A trainable array with a version counter bumped on every assignment."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.version = 0

    @property
    def shape(self):
        return self.value.shape

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ShapeMismatch(f"{self.name}: {value.shape} != {self.value.shape}")
        self.value = value
        self.version += 1


class ObjectNameQueries(Param):
    """T_obj: P x d_model trainable query tokens."""

    def __init__(self, value):
        super().__init__("T_obj", value)

    @classmethod
    def init(cls, cfg: FusionConfig, rng: np.random.Generator | None = None) -> "ObjectNameQueries":
        rng = rng or np.random.default_rng(cfg.seed + 1)
        return cls(rng.normal(0.0, 0.02, (cfg.p, cfg.d_model)))


def tokenize_names(result, vocab: Vocab) -> NameSequence:
    """Join names with [SEP]; each name contributes its whitespace-split words."""
    names = result.labels if isinstance(result, RetrievalResult) else list(result)
    sep = vocab.id(SEP)
    ids, spans = [], []
    for i, name in enumerate(names):
        if i:
            ids.append(sep)
        start = len(ids)
        ids.extend(vocab.encode(normalize(name)))
        spans.append((start, len(ids)))
    return NameSequence(tuple(ids), tuple(spans))


class FusionWeights:
    """Frozen parameters of the fusion stack, seeded deterministically."""

    def __init__(self, cfg: FusionConfig, vocab: Vocab, params: dict):
        self.cfg = cfg
        self.vocab = vocab
        self.params = nn.freeze(params)

    @classmethod
    def init(cls, cfg: FusionConfig, vocab: Vocab) -> "FusionWeights":
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        blocks = []
        for b in range(cfg.n_blocks):
            blk = {
                "self": nn.init_attention(rng, d),
                "ln_self": nn.init_layer_norm(d),
                "ffn": nn.init_ffn(rng, d, cfg.hidden),
                "ln_ffn": nn.init_layer_norm(d),
            }
            if b % 2 == 0:
                blk["cross"] = nn.init_attention(rng, d)
                blk["ln_cross"] = nn.init_layer_norm(d)
            blocks.append(blk)
        params = {
            "token_embedding": rng.normal(0.0, 1.0, (len(vocab), d)),
            "ln_embed": nn.init_layer_norm(d),
            "blocks": blocks,
        }
        if cfg.in_dim != d:
            params["adapter"] = nn.init_linear(rng, cfg.in_dim, d)
        return cls(cfg, vocab, params)

    def checksum(self) -> str:
        return nn.checksum(self.params)

    def adapt(self, features: np.ndarray) -> np.ndarray:
        """Map encoder-width features (..., 32, in_dim) to d_model width."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.cfg.in_dim:
            raise ShapeMismatch(f"feature width {features.shape[-1]} != {self.cfg.in_dim}")
        if "adapter" not in self.params:
            return features
        a = self.params["adapter"]
        return features @ a["w"] + a["b"]

    def embed_names(self, seqs: list[NameSequence]):
        """Padded name embeddings (B, Ls, d) and the key-validity mask (B, Ls)."""
        lmax = max((len(s) for s in seqs), default=0)
        b = len(seqs)
        ids = np.zeros((b, lmax), dtype=np.int64)
        valid = np.zeros((b, lmax), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s.ids
            valid[i, : len(s)] = True
        emb = self.params["token_embedding"][ids] + nn.sinusoidal_positions(lmax, self.cfg.d_model)
        emb, _ = nn.layer_norm(emb, self.params["ln_embed"])
        return emb, valid


_cache_ids = itertools.count()


@dataclass
class FusionCache:
    queries: ObjectNameQueries
    version: int
    weights: FusionWeights
    has_names: np.ndarray
    blocks: list = field(default_factory=list)
    stream: np.ndarray | None = None  # final stream states, for inspection
    ident: int = field(default_factory=lambda: next(_cache_ids))

    @property
    def attention_maps(self) -> list[np.ndarray]:
        maps = []
        for blk in self.blocks:
            maps.append(blk["self"][3])
            if blk.get("cross") is not None:
                maps.append(blk["cross"][1][3])
        return maps


def fuse_batch(seqs: list[NameSequence], q: np.ndarray, t: ObjectNameQueries, w: FusionWeights):
    """Batched forward pass. ``q`` is (B, 32, d_model). Returns (V, cache)."""
    cfg = w.cfg
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 3 or q.shape[0] != len(seqs) or q.shape[1:] != (N_QUERIES, cfg.d_model):
        raise ShapeMismatch(f"Q must be ({len(seqs)}, {N_QUERIES}, {cfg.d_model}), got {q.shape}")
    if t.shape != (cfg.p, cfg.d_model):
        raise ShapeMismatch(f"T_obj must be ({cfg.p}, {cfg.d_model}), got {t.shape}")
    b = len(seqs)
    x = np.concatenate([np.broadcast_to(t.value, (b, cfg.p, cfg.d_model)), q], axis=1)
    has_names = np.array([len(s) > 0 for s in seqs], dtype=bool)
    if has_names.any():
        s_emb, valid = w.embed_names(seqs)
        # rows with no names get a dummy all-valid mask; their output is discarded
        valid = valid | ~has_names[:, None]
        mask = valid[:, None, None, :]
    cache = FusionCache(queries=t, version=t.version, weights=w, has_names=has_names)
    h = cfg.n_heads
    for blk in w.params["blocks"]:
        c = {}
        a, c["self"] = nn.attention(x, x, blk["self"], h)
        x, c["ln_self"] = nn.layer_norm(x + a, blk["ln_self"])
        if "cross" in blk and has_names.any():
            a, attn_cache = nn.attention(x, s_emb, blk["cross"], h, mask)
            y, ln_cache = nn.layer_norm(x + a, blk["ln_cross"])
            c["cross"] = (a, attn_cache)
            c["ln_cross"] = ln_cache
            x = np.where(has_names[:, None, None], y, x)
        f, c["ffn"] = nn.feed_forward(x, blk["ffn"])
        x, c["ln_ffn"] = nn.layer_norm(x + f, blk["ln_ffn"])
        cache.blocks.append(c)
    cache.stream = x
    return x[:, : cfg.p].copy(), cache


def fuse_batch_grad(dv: np.ndarray, cache: FusionCache):
    """Reverse pass. Returns (dT_obj summed over the batch, dQ of shape (B, 32, d))."""
    if cache is None or not cache.blocks:
        raise StaleCache("no forward pass cached")
    if cache.queries.version != cache.version:
        raise StaleCache(
            f"T_obj changed since the forward pass (version {cache.version} -> {cache.queries.version})"
        )
    cfg = cache.weights.cfg
    b = cache.has_names.shape[0]
    dv = np.asarray(dv, dtype=np.float64)
    if dv.shape != (b, cfg.p, cfg.d_model):
        raise ShapeMismatch(f"dV must be ({b}, {cfg.p}, {cfg.d_model}), got {dv.shape}")
    dx = np.zeros((b, cfg.p + N_QUERIES, cfg.d_model))
    dx[:, : cfg.p] = dv
    sel = cache.has_names[:, None, None]
    for c in reversed(cache.blocks):
        d_sum = nn.layer_norm_backward(dx, c["ln_ffn"])
        dx = d_sum + nn.feed_forward_backward(d_sum, c["ffn"])
        if "cross" in c:
            d_sum = nn.layer_norm_backward(np.where(sel, dx, 0.0), c["ln_cross"])
            dq, _ = nn.attention_backward(d_sum, c["cross"][1])
            dx = np.where(sel, d_sum + dq, dx)
        d_sum = nn.layer_norm_backward(dx, c["ln_self"])
        dq, dkv = nn.attention_backward(d_sum, c["self"])
        dx = d_sum + dq + dkv
    return dx[:, : cfg.p].sum(axis=0), dx[:, cfg.p :]


def fuse(seq: NameSequence, q: np.ndarray, t: ObjectNameQueries, w: FusionWeights):
    """Single-example forward. ``q`` is 32 x d_model; returns (V of shape P x d, cache)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (N_QUERIES, w.cfg.d_model):
        raise ShapeMismatch(f"Q must be ({N_QUERIES}, {w.cfg.d_model}), got {q.shape}")
    v, cache = fuse_batch([seq], q[None], t, w)
    return v[0], cache


def fuse_grad(dv: np.ndarray, cache: FusionCache):
    """Gradient wrt T_obj and Q for a single-example cache from :func:`fuse`."""
    dt, dq = fuse_batch_grad(np.asarray(dv)[None], cache)
    return dt, dq[0]
