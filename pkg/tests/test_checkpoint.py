import struct

import numpy as np
import pytest

from conftest import make_tiny_model
from ragcap import checkpoint
from ragcap.captioner import Captioner, train_step
from ragcap.errors import FormatError, IoError


@pytest.fixture
def trained(toy_memory16):
    model, raw, caps = make_tiny_model(toy_memory16)
    opt = model.make_optimizer()
    for _ in range(3):
        train_step(model, raw, caps, opt)
    return model, opt, raw


def fusion_bytes(model):
    return checkpoint.fusion_to_bytes(
        model.fusion.cfg, model.name_vocab, model.decoder.vocab, model.trainables.t_obj.value
    )


def trainable_bytes(model, opt):
    arrays = {p.name: p.value for p in model.trainables.params()}
    return checkpoint.trainables_to_bytes(arrays, opt.m, opt.v, opt.step_count)


def test_fusion_round_trip(trained, tmp_path):
    model, _, _ = trained
    path = tmp_path / "f.evcf"
    checkpoint.save_fusion(path, model.fusion.cfg, model.name_vocab, model.decoder.vocab,
                           model.trainables.t_obj.value)
    data = path.read_bytes()
    assert data[:4] == b"EVCF" and struct.unpack("<I", data[4:8]) == (1,)
    cfg, nv, dv, t_obj = checkpoint.load_fusion(path)
    assert cfg == model.fusion.cfg and nv == model.name_vocab and dv == model.decoder.vocab
    assert t_obj.tobytes() == model.trainables.t_obj.value.tobytes()
    assert checkpoint.fusion_to_bytes(cfg, nv, dv, t_obj) == data


def test_trainables_round_trip(trained, tmp_path):
    model, opt, raw = trained
    path = tmp_path / "t.evct"
    checkpoint.save_trainables(path, model.trainables, opt)
    data = path.read_bytes()
    assert data[:4] == b"EVCT"
    arrays, m, v, step = checkpoint.load_trainables(path)
    assert step == 3
    for name, p in ((p.name, p) for p in model.trainables.params()):
        assert arrays[name].tobytes() == p.value.tobytes()
        assert m[name].tobytes() == opt.m[name].tobytes()
        assert v[name].tobytes() == opt.v[name].tobytes()
    assert checkpoint.trainables_to_bytes(arrays, m, v, step) == data


def test_restored_model_is_identical(trained, tmp_path):
    model, opt, raw = trained
    checkpoint.save_trainables(tmp_path / "t.evct", model.trainables, opt)
    _, nv, dv, _ = checkpoint.fusion_from_bytes(fusion_bytes(model))
    clone = Captioner(model.cfg, model.memory, dv, nv)
    clone_opt = clone.make_optimizer()
    arrays, m, v, step = checkpoint.load_trainables(tmp_path / "t.evct")
    checkpoint.restore_trainables(clone.trainables, arrays, clone_opt, m, v, step)
    assert clone.frozen_checksums() == model.frozen_checksums()
    assert clone.prompts(raw).tobytes() == model.prompts(raw).tobytes()
    # training continues identically from the restored optimizer state
    caps = model.encode_captions(["a cat next to a dog"] * len(raw))
    train_step(model, raw, caps, opt)
    train_step(clone, raw, caps, clone_opt)
    assert clone.trainables.snapshot()["phi.weight"].tobytes() == model.trainables.snapshot()["phi.weight"].tobytes()


@pytest.mark.parametrize("kind", ["fusion", "trainables"])
def test_corruption_rejected(trained, kind):
    model, opt, _ = trained
    data = fusion_bytes(model) if kind == "fusion" else trainable_bytes(model, opt)
    load = checkpoint.fusion_from_bytes if kind == "fusion" else checkpoint.trainables_from_bytes
    with pytest.raises(FormatError):
        load(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load(data[:4] + struct.pack("<I", 2) + data[8:])
    for cut in (3, 8, 12, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            load(data[:cut])
    with pytest.raises(FormatError):
        load(data + b"\x00")
    # an absurd header shape must not allocate, just fail
    bad = bytearray(data)
    bad[8:12] = struct.pack("<I", 2**31)
    with pytest.raises(FormatError):
        load(bytes(bad))


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        checkpoint.load_fusion(tmp_path / "nope.evcf")
    with pytest.raises(IoError):
        checkpoint.load_trainables(tmp_path / "nope.evct")
