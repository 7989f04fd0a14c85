"""Run configuration and its plain ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .decoder import DecoderConfig
from .errors import ConfigError
from .fusion import FusionConfig


@dataclass(frozen=True)
class Config:
    # retrieval / fusion
    k: int = 10
    p: int = 8
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    ffn_dim: int = 64
    # decoder stub
    d_llm: int = 64
    dec_blocks: int = 2
    dec_heads: int = 2
    dec_ffn_dim: int = 128
    # optimisation
    seed: int = 0
    lr: float = 3e-2
    warmup_steps: int = 20
    warmup_start_lr: float = 1e-6
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 24
    max_steps: int = 400
    # decoding
    beam_size: int = 5
    max_len: int = 64

    def __post_init__(self):
        if self.k < 0 or self.p < 1 or self.batch_size < 1 or self.beam_size < 1:
            raise ConfigError("k >= 0, p >= 1, batch_size >= 1 and beam_size >= 1 are required")
        if self.d_model % self.n_heads or self.d_llm % self.dec_heads:
            raise ConfigError("model widths must be divisible by their head counts")

    def fusion_config(self, encoder_dim: int = 0) -> FusionConfig:
        return FusionConfig(
            d_model=self.d_model, p=self.p, n_blocks=self.n_blocks, n_heads=self.n_heads,
            ffn_dim=self.ffn_dim, encoder_dim=0 if encoder_dim == self.d_model else encoder_dim,
            seed=self.seed,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            d_llm=self.d_llm, n_blocks=self.dec_blocks, n_heads=self.dec_heads,
            ffn_dim=self.dec_ffn_dim, seed=self.seed,
        )

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "Config | None" = None) -> "Config":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ConfigError(f"line {lineno}: unknown or malformed setting {raw.strip()!r}")
            try:
                values[key] = int(value) if types[key] in ("int", int) else float(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        return dataclasses.replace(base or cls(), **values)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


# Full-size settings: 768-d visual features, a 5120-d decoder and the full-scale
# optimiser recipe. Only used for arithmetic; never instantiated as a model.
FULL_SCALE = Config(
    k=10, p=8, d_model=768, n_blocks=2, n_heads=12, ffn_dim=3072, d_llm=5120,
    dec_heads=40, dec_ffn_dim=13824, lr=1e-4, warmup_steps=5000, warmup_start_lr=1e-6,
    weight_decay=0.05, beta1=0.9, beta2=0.99, batch_size=24, beam_size=5,
)
