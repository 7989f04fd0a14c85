import hashlib
import subprocess
import sys

import numpy as np
import pytest

from oracles import central_difference, rel_error
from ragcap.errors import ShapeMismatch, StaleCache
from ragcap.fusion import (
    FusionConfig,
    FusionWeights,
    NameSequence,
    ObjectNameQueries,
    fuse,
    fuse_batch,
    fuse_grad,
    tokenize_names,
)
from ragcap.vocab import SEP, UNK, Vocab

NAMES = ["cat", "dog", "hot dog", "traffic light", "person", "zebra"]
CFG = FusionConfig(d_model=16, p=4, n_blocks=2, n_heads=2, ffn_dim=32, seed=3)


@pytest.fixture(scope="module")
def vocab():
    return Vocab.for_names(NAMES)


@pytest.fixture(scope="module")
def weights(vocab):
    return FusionWeights.init(CFG, vocab)


def make_inputs(seed, k=3, cfg=CFG, vocab=None):
    rng = np.random.default_rng(seed)
    vocab = vocab or Vocab.for_names(NAMES)
    names = [NAMES[int(i)] for i in rng.integers(len(NAMES), size=k)]
    seq = tokenize_names(names, vocab)
    q = rng.standard_normal((32, cfg.d_model))
    t = ObjectNameQueries(rng.normal(0, 0.5, (cfg.p, cfg.d_model)))
    return seq, q, t


def test_tokenize_examples(vocab):
    cat, dog, sep = vocab.id("cat"), vocab.id("dog"), vocab.id(SEP)
    assert tokenize_names(["cat", "dog"], vocab).ids == (cat, sep, dog)
    assert tokenize_names([], vocab).ids == ()
    hot = tokenize_names(["hot dog"], vocab)
    assert hot.ids == (vocab.id("hot"), dog) and hot.spans == ((0, 2),)
    assert tokenize_names(["unicorn"], vocab).ids == (vocab.id(UNK),)


def test_separator_count(vocab):
    for k in range(0, 7):
        seq = tokenize_names(NAMES[:k], vocab)
        assert seq.ids.count(vocab.id(SEP)) == max(0, k - 1)
        if seq.ids:
            assert seq.ids[0] != vocab.id(SEP) and seq.ids[-1] != vocab.id(SEP)


def test_vocab_has_sep(vocab):
    assert SEP in vocab and UNK in vocab


@pytest.mark.parametrize("k", range(0, 21))
def test_output_shape_for_every_k(weights, vocab, k):
    seq, q, t = make_inputs(k, k=k, vocab=vocab)
    v, _ = fuse(seq, q, t, weights)
    assert v.shape == (CFG.p, CFG.d_model)
    assert np.all(np.isfinite(v))


def test_empty_names_skip_cross_attention(vocab):
    seq, q, t = make_inputs(0, k=0, vocab=vocab)
    w = FusionWeights.init(CFG, vocab)
    v, cache = fuse(seq, q, t, w)
    assert all("cross" not in c for c in cache.blocks)
    # perturbing every cross-attention weight must not change the result
    params = {k: v for k, v in w.params.items()}
    blocks = []
    for blk in params["blocks"]:
        blk = dict(blk)
        if "cross" in blk:
            blk["cross"] = {n: {"w": l["w"] * 3 + 1, "b": l["b"] + 1} for n, l in blk["cross"].items()}
            blk["ln_cross"] = {"g": blk["ln_cross"]["g"] * 2, "b": blk["ln_cross"]["b"] + 1}
        blocks.append(blk)
    params["blocks"] = blocks
    v2, _ = fuse(seq, q, t, FusionWeights(CFG, vocab, params))
    np.testing.assert_array_equal(v, v2)


def test_names_change_output(weights, vocab):
    _, q, t = make_inputs(1, vocab=vocab)
    a, _ = fuse(tokenize_names(["cat"], vocab), q, t, weights)
    b, _ = fuse(tokenize_names(["zebra"], vocab), q, t, weights)
    assert not np.allclose(a, b)


def test_attention_rows_sum_to_one(weights, vocab):
    seq, q, t = make_inputs(2, k=5, vocab=vocab)
    _, cache = fuse(seq, q, t, weights)
    maps = cache.attention_maps
    assert len(maps) == 3  # self, cross, self
    for m in maps:
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-6)


_DETERMINISM_SCRIPT = """
import hashlib, numpy as np
from ragcap.fusion import FusionConfig, FusionWeights, ObjectNameQueries, fuse, tokenize_names
from ragcap.vocab import Vocab
v = Vocab.for_names({names!r})
cfg = FusionConfig(d_model=16, p=4, n_blocks=2, n_heads=2, ffn_dim=32, seed=3)
rng = np.random.default_rng(99)
q = rng.standard_normal((32, 16))
t = ObjectNameQueries(rng.normal(0, 0.5, (4, 16)))
out, _ = fuse(tokenize_names(["cat", "hot dog"], v), q, t, FusionWeights.init(cfg, v))
print(hashlib.sha256(out.tobytes()).hexdigest())
"""


def test_bit_identical_across_processes():
    script = _DETERMINISM_SCRIPT.format(names=NAMES)
    runs = [subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0].strip()) == 64
    vocab = Vocab.for_names(NAMES)
    rng = np.random.default_rng(99)
    q = rng.standard_normal((32, 16))
    t = ObjectNameQueries(rng.normal(0, 0.5, (4, 16)))
    out, _ = fuse(tokenize_names(["cat", "hot dog"], vocab), q, t, FusionWeights.init(CFG, vocab))
    assert hashlib.sha256(out.tobytes()).hexdigest() == runs[0].strip()


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(vocab, seed):
    cfg = FusionConfig(d_model=16, p=4, n_blocks=2, n_heads=2, ffn_dim=32, seed=seed)
    w = FusionWeights.init(cfg, vocab)
    seq, q, t = make_inputs(100 + seed, k=seed % 4, cfg=cfg, vocab=vocab)
    probe = np.random.default_rng(seed).standard_normal((cfg.p, cfg.d_model))

    def loss():
        return float((fuse(seq, q, t, w)[0] * probe).sum())

    _, cache = fuse(seq, q, t, w)
    dt, dq = fuse_grad(probe, cache)
    assert rel_error(dt, central_difference(loss, t.value)) <= 1e-4
    assert rel_error(dq, central_difference(loss, q)) <= 1e-4


def test_zero_upstream_gives_zero_gradient(weights, vocab):
    seq, q, t = make_inputs(4, vocab=vocab)
    _, cache = fuse(seq, q, t, weights)
    dt, dq = fuse_grad(np.zeros((CFG.p, CFG.d_model)), cache)
    assert not dt.any() and not dq.any()


def test_stale_cache(weights, vocab):
    seq, q, t = make_inputs(5, vocab=vocab)
    _, cache = fuse(seq, q, t, weights)
    t.assign(t.value + 1.0)
    with pytest.raises(StaleCache):
        fuse_grad(np.ones((CFG.p, CFG.d_model)), cache)


def test_frozen_weights_read_only(weights):
    with pytest.raises(ValueError):
        weights.params["token_embedding"][0, 0] = 1.0
    with pytest.raises(ValueError):
        weights.params["blocks"][0]["cross"]["q"]["w"][0, 0] = 1.0


def test_same_seed_same_weights(vocab):
    assert FusionWeights.init(CFG, vocab).checksum() == FusionWeights.init(CFG, vocab).checksum()
    other = FusionConfig(d_model=16, p=4, n_blocks=2, n_heads=2, ffn_dim=32, seed=4)
    assert FusionWeights.init(other, vocab).checksum() != FusionWeights.init(CFG, vocab).checksum()


def test_batched_matches_single(weights, vocab):
    rng = np.random.default_rng(7)
    seqs = [tokenize_names(NAMES[:k], vocab) for k in (0, 2, 6, 1)]
    q = rng.standard_normal((4, 32, CFG.d_model))
    t = ObjectNameQueries(rng.normal(0, 0.5, (CFG.p, CFG.d_model)))
    vb, cache = fuse_batch(seqs, q, t, weights)
    for i, s in enumerate(seqs):
        np.testing.assert_allclose(vb[i], fuse(s, q[i], t, weights)[0], atol=1e-12)


def test_shape_errors(weights, vocab):
    seq, q, t = make_inputs(6, vocab=vocab)
    with pytest.raises(ShapeMismatch):
        fuse(seq, q[:31], t, weights)
    with pytest.raises(ShapeMismatch):
        fuse(seq, q[:, :8], t, weights)
    with pytest.raises(ShapeMismatch):
        fuse(seq, q, ObjectNameQueries(np.zeros((3, CFG.d_model))), weights)


def test_adapter_maps_encoder_width(vocab):
    cfg = FusionConfig(d_model=16, p=4, n_blocks=2, n_heads=2, ffn_dim=32, encoder_dim=24)
    w = FusionWeights.init(cfg, vocab)
    raw = np.random.default_rng(0).standard_normal((2, 32, 24))
    assert w.adapt(raw).shape == (2, 32, 16)
    with pytest.raises(ShapeMismatch):
        w.adapt(raw[..., :16])


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(d_model=15, n_heads=2)
    with pytest.raises(ValueError):
        FusionConfig(d_model=16, p=0)
