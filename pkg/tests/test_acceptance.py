"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (with its wall time) that is printed in the
pytest terminal summary; run ``pytest tests/test_acceptance.py`` to see them.
"""
import functools
import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import TINY, make_tiny_model
from oracles import brute_force_retrieve, central_difference, random_instance, rel_error
from ragcap import checkpoint, memory, toy
from ragcap.captioner import (
    DEFAULT_TEMPLATE,
    Captioner,
    count_trainable_params,
    decoder_vocab_for,
    generate,
    train_step,
)
from ragcap.config import Config
from ragcap.decoder import DecoderStub
from ragcap.decoding import greedy
from ragcap.errors import FormatError
from ragcap.memory import MemoryRecord, Source
from ragcap.retrieval import retrieve_names
from svc_helpers import (
    Client,
    expansion_batches,
    expected,
    query_pool,
    random_memory,
    run_stress,
    running,
    snapshot_table,
)

RESULTS: list[str] = []


def criterion(number: int, title: str, limit: float | None = None):
    """Time the wrapped test, enforce ``limit`` seconds, and record a PASS/FAIL line."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            status = "FAIL"
            try:
                fn(*args, **kwargs)
                elapsed = time.perf_counter() - start
                assert limit is None or elapsed < limit, f"took {elapsed:.3f}s, limit {limit}s"
                status = "PASS"
            finally:
                elapsed = time.perf_counter() - start
                line = f"{status} [{number:2d}] {title} ({elapsed:.3f}s)"
                RESULTS.append(line)
                print(line)

        return run

    return wrap


@criterion(1, "trainable parameter count", limit=1e-3)
def test_01_parameter_count():
    full = count_trainable_params(SimpleNamespace(d_model=768, p=8, d_llm=5120))
    linear_only = count_trainable_params(SimpleNamespace(d_model=768, p=0, d_llm=5120), image_queries=0)
    assert full == 3_968_000 and round(full / 1e6, 2) == 3.97
    assert linear_only == 3_937_280 and round(linear_only / 1e6, 2) == 3.94


@criterion(2, "memory size arithmetic", limit=1.0)
def test_02_memory_counts():
    mem = memory.build(toy.catalog_records(dim=16), 16)
    st = mem.stats()
    assert (st.count, st.distinct_names) == (14596, 1203)
    extra = toy.pooled_records([f"new_{i}" for i in range(2396)], np.full(2396, 5), Source.SYNTHETIC, 16,
                               np.random.default_rng(1))
    assert len(memory.expand(mem, extra)) == 26576


@criterion(3, "retrieval matches brute-force oracle on 200 instances", limit=10.0)
def test_03_retrieval_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        m, d = int(rng.integers(1, 513)), int(rng.integers(1, 65))
        keys, names, q = random_instance(rng, m, d, dup_keys=int(rng.integers(0, 4)))
        mem = memory.build([MemoryRecord(n, key=k) for n, k in zip(names, keys)], d)
        ranking = brute_force_retrieve(q, mem.keys, mem.names, None)
        for k in (0, 1, 5, 10, 20):
            got = retrieve_names(q, mem, k)
            want = ranking[:k]
            assert got.labels == [n for n, _ in want]
            assert all(abs(a - b) <= 1e-6 for (_, a), (_, b) in zip(got.names, want))


@criterion(4, "argmax scale invariance on 100 instances")
def test_04_scale_invariance():
    rng = np.random.default_rng(7)
    for _ in range(100):
        m, d = int(rng.integers(2, 200)), int(rng.integers(2, 40))
        keys, names, q = random_instance(rng, m, d, dup_keys=2)
        mem = memory.build([MemoryRecord(n, key=k) for n, k in zip(names, keys)], d)
        k = int(rng.choice([1, 5, 10, 20]))
        base = retrieve_names(q, mem, k).labels
        a = float(np.exp(rng.uniform(-6, 6)))
        if rng.random() < 0.5:
            scaled = keys.copy()
            scaled[rng.integers(m)] *= np.float32(a)
            other = memory.build([MemoryRecord(n, key=kk) for n, kk in zip(names, scaled)], d)
            assert retrieve_names(q, other, k).labels == base
        else:
            q2 = q.copy()
            q2[rng.integers(len(q2))] *= a
            assert retrieve_names(q2, mem, k).labels == base


@criterion(5, "self-retrieval on a 1000-entry memory")
def test_05_self_retrieval():
    rng = np.random.default_rng(5)
    keys = rng.standard_normal((1000, 24))
    names = [f"name{i}" for i in range(1000)]
    mem = memory.build([MemoryRecord(n, key=k) for n, k in zip(names, keys)], 24)
    for i, e in enumerate(mem):
        name, score = retrieve_names(e.key[None], mem, 1).names[0]
        assert name == names[i] and abs(score - 1.0) <= 1e-6


@criterion(6, "T_obj and phi gradients match finite differences (10 seeds, d_model=16)", limit=30.0)
def test_06_gradient_check(toy_memory16):
    assert TINY.d_model == 16
    for seed in range(10):
        model, raw, caps = make_tiny_model(toy_memory16, n=1, seed=seed)
        seqs = model.name_sequences(model.retrieve(raw))
        _, grads = model.loss_and_grads(raw, caps, seqs)
        for p in (model.trainables.t_obj, *model.trainables.phi.params):
            fd = central_difference(lambda: model.loss(raw, caps, seqs), p.value, h=1e-5)
            err = rel_error(grads[p.name], fd)
            assert err <= 1e-4, f"seed {seed} {p.name}: relative error {err:.2e}"


@criterion(7, "frozen weights bit-identical after 100 steps")
def test_07_freeze_contract(toy_memory16):
    model, raw, caps = make_tiny_model(toy_memory16, n=4)
    frozen = model.frozen_checksums()
    start = model.trainables.snapshot()
    opt = model.make_optimizer()
    for _ in range(100):
        train_step(model, raw, caps, opt)
    assert model.frozen_checksums() == frozen
    end = model.trainables.snapshot()
    assert set(end) == {"T_img", "T_obj", "phi.weight", "phi.bias"}
    assert all(not np.array_equal(start[k], end[k]) for k in end)


@criterion(8, "toy overfit: loss <= 10% of initial and >= 95% exact greedy captions", limit=120.0)
def test_08_toy_overfit():
    cfg = Config()
    assert cfg.max_steps <= 2000
    mem = memory.build(toy.toy_memory_records(dim=cfg.d_model, seed=cfg.seed), cfg.d_model)
    data = toy.toy_captions(20, dim=cfg.d_model, seed=cfg.seed)
    raw = np.stack([d[1] for d in data])
    texts = [d[2] for d in data]
    model = Captioner(cfg, mem, decoder_vocab_for(texts))
    caps = model.encode_captions(texts)
    initial = model.loss(raw, caps)
    opt = model.make_optimizer()
    for _ in range(cfg.max_steps):
        train_step(model, raw, caps, opt)
    final = model.loss(raw, caps)
    assert final <= 0.10 * initial, f"final {final:.4f} vs initial {initial:.4f}"
    exact = sum(model.caption(x, beam_size=1)[0] == t for x, t in zip(raw, texts))
    assert exact >= 0.95 * len(texts), f"{exact}/{len(texts)} exact"


@criterion(9, "prompt template is byte-exact")
def test_09_prompt_bytes():
    want = "###Human: <Img><ProjFeature></Img> Describe this image in detail. ###Assistant:"
    assert DEFAULT_TEMPLATE.serialize().encode("utf-8") == want.encode("utf-8")


def _reference_greedy(prompt, decoder: DecoderStub, max_len):
    tokens = []
    for _ in range(max_len):
        x = np.vstack([prompt, decoder.params["token_embedding"][tokens].reshape(-1, prompt.shape[1])])
        hidden, _ = decoder.forward(x[None])
        tok = int(np.argmax(hidden[0, -1] @ decoder.params["lm_head"]))
        tokens.append(tok)
        if tok == decoder.eos_id:
            break
    return tuple(tokens)


@criterion(10, "beam=1 equals greedy and beam=5 >= greedy on 100 prompts")
def test_10_beam_properties():
    cfg = Config(max_len=16)
    texts = [d[2] for d in toy.toy_captions(20, dim=8)]
    decoder = DecoderStub.init(cfg.decoder_config(), decoder_vocab_for(texts))
    rng = np.random.default_rng(10)
    for _ in range(100):
        prompt = rng.standard_normal((int(rng.integers(4, 24)), cfg.d_llm))
        g = greedy(prompt, decoder, cfg.max_len)
        one = generate(prompt, decoder, 1, cfg.max_len)
        assert one.tokens == g.tokens == _reference_greedy(prompt, decoder, cfg.max_len)
        assert generate(prompt, decoder, 5, cfg.max_len).score >= g.score


@criterion(11, "memory and checkpoint round trips are bit-identical; bad headers rejected")
def test_11_persistence(tmp_path, toy_memory16):
    mem = memory.build(toy.catalog_records(dim=8, n_names=40, n_real=100), 8)
    memory.save(mem, tmp_path / "m.evcm")
    raw_mem = (tmp_path / "m.evcm").read_bytes()
    back = memory.load(tmp_path / "m.evcm")
    assert back.to_bytes() == raw_mem and back.keys.tobytes() == mem.keys.tobytes()
    assert back.names == mem.names and back.sources == mem.sources

    model, raw, caps = make_tiny_model(toy_memory16)
    opt = model.make_optimizer()
    train_step(model, raw, caps, opt)
    checkpoint.save_fusion(tmp_path / "f.evcf", model.fusion.cfg, model.name_vocab, model.decoder.vocab,
                           model.trainables.t_obj.value)
    checkpoint.save_trainables(tmp_path / "t.evct", model.trainables, opt)
    f_bytes = (tmp_path / "f.evcf").read_bytes()
    t_bytes = (tmp_path / "t.evct").read_bytes()
    assert checkpoint.fusion_to_bytes(*checkpoint.load_fusion(tmp_path / "f.evcf")) == f_bytes
    assert checkpoint.trainables_to_bytes(*checkpoint.load_trainables(tmp_path / "t.evct")) == t_bytes
    arrays, _, _, _ = checkpoint.load_trainables(tmp_path / "t.evct")
    for p in model.trainables.params():
        assert arrays[p.name].tobytes() == p.value.tobytes()

    for data, loader in ((raw_mem, memory.VisualNameMemory.from_bytes),
                         (f_bytes, checkpoint.fusion_from_bytes),
                         (t_bytes, checkpoint.trainables_from_bytes)):
        for corrupt in (b"XXXX" + data[4:], data[:4] + b"\x09\x00\x00\x00" + data[8:], data[:6]):
            with pytest.raises(FormatError):
                loader(corrupt)


@criterion(12, "HTTP service: 1000-request equivalence and 10k-request snapshot stress")
def test_12_service():
    rng = np.random.default_rng(12)
    mem = random_memory(rng)
    pool = query_pool(rng, mem, 1000)
    want = expected(pool, mem)
    with running(mem) as (_, port):
        c = Client(port)
        for (body, _, _), exp in zip(pool, want):
            status, got, _ = c.request("POST", "/v1/retrieve", body)
            assert status == 200 and got == exp
        c.close()

    stress_pool = pool[:60]
    batches = expansion_batches(rng, 25, mem.dim)
    table = snapshot_table(mem, batches, stress_pool)
    with running(mem) as (state, port):
        checked, failures = run_stress(port, stress_pool, batches, table, n_requests=10_000)
        assert state.snapshot.fingerprint == list(table)[-1]
    assert not failures, failures[:5]
    assert checked >= 10_000
