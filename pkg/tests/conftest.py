import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ragcap import memory, toy  # noqa: E402
from ragcap.captioner import Captioner, decoder_vocab_for  # noqa: E402
from ragcap.config import Config  # noqa: E402
from ragcap.memory import MemoryRecord  # noqa: E402

# Small enough that finite-difference sweeps stay fast.
TINY = Config(d_model=16, p=4, n_heads=2, ffn_dim=32, d_llm=16, dec_heads=2, dec_ffn_dim=32,
              k=5, lr=1e-2, warmup_steps=5, max_steps=100, max_len=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def three_entry_memory():
    recs = [
        MemoryRecord("cat", key=np.array([1.0, 0.0])),
        MemoryRecord("dog", key=np.array([0.0, 1.0])),
        MemoryRecord("cat", key=np.array([0.7071, 0.7071])),
    ]
    return memory.build(recs, 2)


@pytest.fixture(scope="session")
def toy_memory16():
    return memory.build(toy.toy_memory_records(dim=16, real_per_name=2, synthetic_per_name=2), 16)


def make_tiny_model(mem, n=4, seed=0, cfg=TINY):
    data = toy.toy_captions(n, dim=mem.dim, seed=seed)
    raw = np.stack([d[1] for d in data])
    texts = [d[2] for d in data]
    model = Captioner(cfg.replace(seed=seed), mem, decoder_vocab_for(texts))
    return model, raw, model.encode_captions(texts)


@pytest.fixture
def tiny_model(toy_memory16):
    return make_tiny_model(toy_memory16)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("]")[0].split("[")[1].strip().zfill(2)):
            terminalreporter.write_line(line)
