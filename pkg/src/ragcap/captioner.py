"""Caption generation: projection, prompt assembly, loss, training, decoding.

Only three parameter groups train: the image query tokens ``T_img``, the
object-name query tokens ``T_obj`` and the projection layer ``phi``. The
pseudo-encoder adds ``T_img`` row-wise to the (width-adapted) encoder
features; everything else (fusion stack, decoder, embeddings) is frozen.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import Config
from .decoder import DecoderConfig, DecoderStub
from .decoding import Hypothesis, beam_search, greedy
from .errors import EmptyCaption, ShapeMismatch
from .fusion import (
    N_QUERIES,
    FusionConfig,
    FusionWeights,
    NameSequence,
    ObjectNameQueries,
    Param,
    fuse_batch,
    fuse_batch_grad,
    tokenize_names,
)
from .memory import VisualNameMemory
from .optim import AdamW, WarmupCosine
from .retrieval import RetrievalResult, retrieve_names
from .vocab import Vocab, normalize


@dataclass(frozen=True)
class PromptTemplate:
    prefix: str = "###Human: <Img>"
    placeholder: str = "<ProjFeature>"
    suffix: str = "</Img> Describe this image in detail. ###Assistant:"

    def serialize(self) -> str:
        return self.prefix + self.placeholder + self.suffix

    @property
    def prefix_words(self) -> list[str]:
        return self.prefix.split()

    @property
    def suffix_words(self) -> list[str]:
        return self.suffix.split()


DEFAULT_TEMPLATE = PromptTemplate()


class ProjectionLayer:
    """phi: affine map from d_model to d_llm, applied row-wise."""

    def __init__(self, weight, bias):
        self.weight = Param("phi.weight", weight)
        self.bias = Param("phi.bias", bias)

    @classmethod
    def init(cls, d_model: int, d_llm: int, rng: np.random.Generator) -> "ProjectionLayer":
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_llm)), np.zeros(d_llm))

    @property
    def params(self) -> list[Param]:
        return [self.weight, self.bias]


def project(q: np.ndarray, v: np.ndarray, phi: ProjectionLayer) -> np.ndarray:
    """Row-wise affine map of the stacked block ``[Q ; V]``; leading batch dims allowed."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_model = phi.weight.shape[0]
    if q.shape[-1] != d_model or v.shape[-1] != d_model or q.shape[:-2] != v.shape[:-2]:
        raise ShapeMismatch(f"cannot project Q {q.shape} and V {v.shape} with phi {phi.weight.shape}")
    x = np.concatenate([q, v], axis=-2)
    return x @ phi.weight.value + phi.bias.value


class TrainableSet:
    """Exactly the three trained groups: T_img, T_obj and phi."""

    def __init__(self, t_img: Param, t_obj: ObjectNameQueries, phi: ProjectionLayer):
        self.t_img = t_img
        self.t_obj = t_obj
        self.phi = phi

    @classmethod
    def init(cls, cfg: Config) -> "TrainableSet":
        rng = np.random.default_rng(cfg.seed + 104729)
        t_img = Param("T_img", np.zeros((N_QUERIES, cfg.d_model)))
        t_obj = ObjectNameQueries(rng.normal(0.0, 0.02, (cfg.p, cfg.d_model)))
        return cls(t_img, t_obj, ProjectionLayer.init(cfg.d_model, cfg.d_llm, rng))

    def groups(self) -> dict[str, list[Param]]:
        return {
            "image_queries": [self.t_img],
            "object_queries": [self.t_obj],
            "projection": self.phi.params,
        }

    def params(self) -> list[Param]:
        return [p for ps in self.groups().values() for p in ps]

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}


def count_trainable_params(cfg, *, image_queries: int = N_QUERIES) -> int:
    """32*d_model + P*d_model + d_model*d_llm + d_llm, from config fields alone."""
    return image_queries * cfg.d_model + cfg.p * cfg.d_model + cfg.d_model * cfg.d_llm + cfg.d_llm


@dataclass
class TrainingBatch:
    """Embedded prompts (B, N, d_llm) plus caption token ids (each ending in EOS)."""

    prompt: np.ndarray
    captions: list[list[int]]
    texts: list[str] | None = None


def assemble_prompt(projected: np.ndarray, decoder: DecoderStub, template: PromptTemplate = DEFAULT_TEMPLATE):
    """Embedded prefix ++ projected feature rows ++ embedded suffix.

    ``projected`` is (R, d_llm) or (B, R, d_llm); the result matches its rank.
    """
    projected = np.asarray(projected, dtype=np.float64)
    single = projected.ndim == 2
    if single:
        projected = projected[None]
    b = projected.shape[0]
    pre = decoder.embed([decoder.vocab.id(w) for w in template.prefix_words]).reshape(-1, decoder.cfg.d_llm)
    suf = decoder.embed([decoder.vocab.id(w) for w in template.suffix_words]).reshape(-1, decoder.cfg.d_llm)
    out = np.concatenate(
        [np.broadcast_to(pre, (b,) + pre.shape), projected, np.broadcast_to(suf, (b,) + suf.shape)],
        axis=1,
    )
    return out[0] if single else out


def ce_loss(batch: TrainingBatch, decoder: DecoderStub):
    """Mean per-token negative log-likelihood of the captions given the prompts.

    Returns ``(loss, d_loss / d_prompt)``; decoder weights are not touched.
    """
    prompt = np.asarray(batch.prompt, dtype=np.float64)
    b, n, d = prompt.shape
    lengths = [len(c) for c in batch.captions]
    if len(lengths) != b:
        raise ShapeMismatch(f"{b} prompts but {len(lengths)} captions")
    if min(lengths, default=0) == 0:
        raise EmptyCaption("every caption needs at least one token")
    lmax = max(lengths)
    x = np.zeros((b, n + lmax - 1, d))
    x[:, :n] = prompt
    targets = np.zeros((b, lmax), dtype=np.int64)
    mask = np.zeros((b, lmax))
    for i, cap in enumerate(batch.captions):
        targets[i, : len(cap)] = cap
        mask[i, : len(cap)] = 1.0
        if len(cap) > 1:
            x[i, n : n + len(cap) - 1] = decoder.embed(cap[:-1])
    hidden, cache = decoder.forward(x)
    window = slice(n - 1, n - 1 + lmax)
    logp = nn.log_softmax(decoder.logits(hidden[:, window]))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    total = float(mask.sum())
    loss = -float((picked * mask).sum()) / total + 0.0
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits *= mask[..., None] / total
    dhidden = np.zeros_like(hidden)
    dhidden[:, window] = dlogits @ decoder.params["lm_head"].T
    dx = decoder.backward(dhidden, cache)
    return loss, dx[:, :n]


class Captioner:
    """The full pipeline over a memory, frozen fusion stack and frozen decoder."""

    def __init__(
        self,
        cfg: Config,
        memory: VisualNameMemory,
        decoder_vocab: Vocab,
        name_vocab: Vocab | None = None,
        trainables: TrainableSet | None = None,
        template: PromptTemplate = DEFAULT_TEMPLATE,
    ):
        self.cfg = cfg
        self.memory = memory
        self.template = template
        self.name_vocab = name_vocab or Vocab.for_names(memory.names)
        self.fusion = FusionWeights.init(cfg.fusion_config(memory.dim), self.name_vocab)
        self.decoder = DecoderStub.init(cfg.decoder_config(), decoder_vocab)
        self.trainables = trainables or TrainableSet.init(cfg)
        if self.trainables.num_params() != count_trainable_params(cfg):
            raise ShapeMismatch("trainable set does not match the configuration")

    @property
    def n_prefix(self) -> int:
        return len(self.template.prefix_words)

    def frozen_checksums(self) -> dict[str, str]:
        return {
            "fusion": nn.checksum({k: v for k, v in self.fusion.params.items() if k != "token_embedding"}),
            "fusion_token_embedding": nn.checksum(self.fusion.params["token_embedding"]),
            "decoder": nn.checksum({k: v for k, v in self.decoder.params.items() if k != "token_embedding"}),
            "decoder_token_embedding": nn.checksum(self.decoder.params["token_embedding"]),
        }

    def encode_captions(self, texts) -> list[list[int]]:
        return [self.decoder.vocab.encode(normalize(t)) + [self.decoder.eos_id] for t in texts]

    def visual_features(self, raw: np.ndarray) -> np.ndarray:
        """Q = adapter(raw encoder features) + T_img, shape (B, 32, d_model)."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 3 or raw.shape[1] != N_QUERIES:
            raise ShapeMismatch(f"expected (B, {N_QUERIES}, D) features, got {raw.shape}")
        return self.fusion.adapt(raw) + self.trainables.t_img.value

    def retrieve(self, raw: np.ndarray, q: np.ndarray | None = None) -> list[RetrievalResult]:
        """Retrieval queries are Q when widths agree, else the raw encoder features."""
        q = self.visual_features(raw) if q is None else q
        queries = q if self.memory.dim == self.cfg.d_model else np.asarray(raw, dtype=np.float64)
        return [retrieve_names(x, self.memory, self.cfg.k) for x in queries]

    def name_sequences(self, results) -> list[NameSequence]:
        return [tokenize_names(r, self.name_vocab) for r in results]

    def _forward(self, raw, seqs=None):
        q = self.visual_features(raw)
        if seqs is None:
            seqs = self.name_sequences(self.retrieve(raw, q))
        v, fcache = fuse_batch(seqs, q, self.trainables.t_obj, self.fusion)
        projected = project(q, v, self.trainables.phi)
        prompt = assemble_prompt(projected, self.decoder, self.template)
        return prompt, (q, v, fcache)

    def prompts(self, raw, seqs=None) -> np.ndarray:
        return self._forward(raw, seqs)[0]

    def loss(self, raw, captions, seqs=None) -> float:
        prompt, _ = self._forward(raw, seqs)
        loss, _ = ce_loss(TrainingBatch(prompt, captions), self.decoder)
        return loss

    def loss_and_grads(self, raw, captions, seqs=None):
        """Loss and gradients keyed by trainable parameter name."""
        prompt, (q, v, fcache) = self._forward(raw, seqs)
        loss, dprompt = ce_loss(TrainingBatch(prompt, captions), self.decoder)
        n_feat = N_QUERIES + self.cfg.p
        dy = dprompt[:, self.n_prefix : self.n_prefix + n_feat]
        x = np.concatenate([q, v], axis=1)
        phi = self.trainables.phi
        dx = dy @ phi.weight.value.T
        dt_obj, dq_fused = fuse_batch_grad(dx[:, N_QUERIES:], fcache)
        grads = {
            "T_img": (dx[:, :N_QUERIES] + dq_fused).sum(axis=0),
            "T_obj": dt_obj,
            "phi.weight": np.einsum("bri,brj->ij", x, dy),
            "phi.bias": dy.sum(axis=(0, 1)),
        }
        return loss, grads

    def make_optimizer(self) -> AdamW:
        cfg = self.cfg
        schedule = WarmupCosine(cfg.lr, cfg.warmup_steps, cfg.max_steps, cfg.warmup_start_lr, cfg.min_lr)
        return AdamW(self.trainables.groups(), schedule, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)

    def caption(self, raw_single: np.ndarray, beam_size: int | None = None) -> tuple[str, Hypothesis]:
        prompt = self.prompts(np.asarray(raw_single)[None])[0]
        hyp = generate(prompt, self.decoder, beam_size or self.cfg.beam_size, self.cfg.max_len)
        tokens = [t for t in hyp.tokens if t != self.decoder.eos_id]
        return " ".join(self.decoder.vocab.decode(tokens)), hyp


def train_step(model: Captioner, raw, captions, optimizer: AdamW, seqs=None) -> float:
    """One optimizer step on a batch; returns the pre-update loss."""
    loss, grads = model.loss_and_grads(raw, captions, seqs)
    optimizer.step(grads)
    return loss


def generate(prompt: np.ndarray, decoder: DecoderStub, beam_size: int = 5, max_len: int = 64) -> Hypothesis:
    """Best hypothesis under length-normalised log-probability (greedy for beam 1)."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if beam_size == 1:
        return greedy(prompt, decoder, max_len)
    return beam_search(prompt, decoder, beam_size, max_len)[0]


def decoder_vocab_for(captions, template: PromptTemplate = DEFAULT_TEMPLATE) -> Vocab:
    return Vocab.for_decoder(template.prefix_words + template.suffix_words, captions)


__all__ = [
    "Captioner",
    "DecoderConfig",
    "FusionConfig",
    "ProjectionLayer",
    "PromptTemplate",
    "TrainableSet",
    "TrainingBatch",
    "assemble_prompt",
    "ce_loss",
    "count_trainable_params",
    "decoder_vocab_for",
    "generate",
    "project",
    "train_step",
]
