"""Frozen toy causal decoder standing in for the language model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .vocab import EOS, Vocab


@dataclass(frozen=True)
class DecoderConfig:
    d_llm: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    ffn_dim: int = 0  # 0 -> 4 * d_llm
    seed: int = 0

    def __post_init__(self):
        if self.d_llm <= 0 or self.d_llm % self.n_heads:
            raise ValueError(f"d_llm={self.d_llm} must be divisible by n_heads={self.n_heads}")


class DecoderStub:
    """Pre-LN causal transformer with sinusoidal positions and an untied LM head.

    All weights are frozen. :meth:`backward` returns the gradient with respect
    to the input embeddings, which is how training signal reaches the prompt.
    """

    def __init__(self, cfg: DecoderConfig, vocab: Vocab, params: dict):
        self.cfg = cfg
        self.vocab = vocab
        self.params = nn.freeze(params)
        self.eos_id = vocab.id(EOS) if EOS in vocab else None

    @classmethod
    def init(cls, cfg: DecoderConfig, vocab: Vocab) -> "DecoderStub":
        rng = np.random.default_rng(cfg.seed + 7919)
        d = cfg.d_llm
        hidden = cfg.ffn_dim or 4 * d
        params = {
            "token_embedding": rng.normal(0.0, 1.0, (len(vocab), d)),
            "blocks": [
                {
                    "ln_attn": nn.init_layer_norm(d),
                    "attn": nn.init_attention(rng, d),
                    "ln_ffn": nn.init_layer_norm(d),
                    "ffn": nn.init_ffn(rng, d, hidden),
                }
                for _ in range(cfg.n_blocks)
            ],
            "ln_final": nn.init_layer_norm(d),
            "lm_head": rng.normal(0.0, 2.0 / np.sqrt(d), (d, len(vocab))),
        }
        return cls(cfg, vocab, params)

    def checksum(self) -> str:
        return nn.checksum(self.params)

    def embed(self, ids) -> np.ndarray:
        return self.params["token_embedding"][np.asarray(ids, dtype=np.int64)]

    def forward(self, x: np.ndarray):
        """Hidden states after the final layer norm for inputs ``x`` (B, T, d)."""
        t = x.shape[1]
        causal = np.tril(np.ones((t, t), dtype=bool))
        h = x + nn.sinusoidal_positions(t, self.cfg.d_llm)
        caches = []
        for blk in self.params["blocks"]:
            a_in, c_ln1 = nn.layer_norm(h, blk["ln_attn"])
            a, c_attn = nn.attention(a_in, a_in, blk["attn"], self.cfg.n_heads, causal)
            h = h + a
            f_in, c_ln2 = nn.layer_norm(h, blk["ln_ffn"])
            f, c_ffn = nn.feed_forward(f_in, blk["ffn"])
            h = h + f
            caches.append((c_ln1, c_attn, c_ln2, c_ffn))
        out, c_final = nn.layer_norm(h, self.params["ln_final"])
        return out, (caches, c_final)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        caches, c_final = cache
        dh = nn.layer_norm_backward(dout, c_final)
        for c_ln1, c_attn, c_ln2, c_ffn in reversed(caches):
            dh = dh + nn.layer_norm_backward(nn.feed_forward_backward(dh, c_ffn), c_ln2)
            dq, dkv = nn.attention_backward(dh, c_attn)
            dh = dh + nn.layer_norm_backward(dq + dkv, c_ln1)
        return dh

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        return hidden @ self.params["lm_head"]

    def next_logprobs(self, prompt: np.ndarray, prefixes) -> np.ndarray:
        """Log-probabilities of the next token for each token prefix after ``prompt`` (N, d)."""
        n = len(prefixes)
        t = len(prefixes[0])
        x = np.empty((n, prompt.shape[0] + t, self.cfg.d_llm))
        x[:] = np.concatenate([prompt, np.zeros((t, self.cfg.d_llm))])[None]
        if t:
            x[:, prompt.shape[0]:] = self.embed(np.array(prefixes))
        hidden, _ = self.forward(x)
        return nn.log_softmax(self.logits(hidden[:, -1]))
