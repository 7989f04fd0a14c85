"""Command-line entry point: ``ragcap <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint, memory, toy
from .captioner import Captioner, decoder_vocab_for, train_step
from .config import Config
from .encoder import PseudoEncoder, read_features, write_features
from .errors import ConfigError, RagcapError
from .retrieval import retrieve_names


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _seed(args) -> int:
    return args.seed if args.seed is not None else _config(args).seed


def cmd_build(args) -> int:
    mem = memory.build(memory.read_records(args.input), args.dim)
    memory.save(mem, args.out)
    print(f"wrote {len(mem)} entries to {args.out}")
    return 0


def cmd_expand(args) -> int:
    mem = memory.load(args.mem)
    new = memory.expand(mem, memory.read_records(args.input))
    memory.save(new, args.out or args.mem)
    print(f"expanded {len(mem)} -> {len(new)} entries")
    return 0


def cmd_stats(args) -> int:
    st = memory.load(args.mem).stats()
    if args.json:
        print(json.dumps(st.as_dict(), sort_keys=True))
    else:
        print(f"count: {st.count}")
        print(f"distinct_names: {st.distinct_names}")
        print(f"dim: {st.dim}")
        for label, n in st.per_source.items():
            print(f"{label}: {n}")
    return 0


def cmd_retrieve(args) -> int:
    mem = memory.load(args.mem)
    for image_id, block in read_features(args.features, mem.dim):
        result = retrieve_names(block, mem, args.k)
        if args.json:
            print(json.dumps({"id": image_id, **result.as_json()}))
        else:
            names = ", ".join(f"{n} ({s:.4f})" for n, s in result.names)
            print(f"{image_id}\t{names}")
    return 0


def _read_ids(args) -> list[str]:
    ids = list(args.ids)
    if args.ids_file:
        with open(args.ids_file, encoding="utf-8") as fh:
            ids.extend(line.strip() for line in fh if line.strip())
    if not ids:
        raise ConfigError("no image ids given")
    return ids


def cmd_encode(args) -> int:
    enc = PseudoEncoder(seed=_seed(args), dim=args.dim)
    items = [(i, enc.encode(i)) for i in _read_ids(args)]
    if args.out:
        write_features(args.out, items)
    else:
        for image_id, block in items:
            print(json.dumps({"id": image_id, "features": block.tolist()}))
    return 0


def cmd_demo_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    dim = args.dim
    with open(os.path.join(args.out, "records.jsonl"), "w", encoding="utf-8") as fh:
        for rec in toy.toy_memory_records(dim=dim, seed=_seed(args)):
            fh.write(json.dumps(rec.to_json()) + "\n")
    with open(os.path.join(args.out, "captions.jsonl"), "w", encoding="utf-8") as fh:
        for image_id, feats, caption in toy.toy_captions(args.n, dim=dim, seed=_seed(args)):
            fh.write(json.dumps({"id": image_id, "caption": caption, "features": feats.tolist()}) + "\n")
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(_config(args).replace(d_model=dim).to_text())
    print(f"wrote records.jsonl, captions.jsonl, config.txt to {args.out}")
    return 0


def _load_captions(path, dim: int, seed: int):
    enc = PseudoEncoder(seed=seed, dim=dim)
    ids, feats, texts = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            ids.append(str(obj["id"]))
            texts.append(obj["caption"])
            f = obj.get("features")
            feats.append(enc.encode(ids[-1]) if f is None else np.asarray(f, dtype=np.float64))
    return ids, np.stack(feats), texts


def cmd_demo_train(args) -> int:
    cfg = _config(args)
    mem = memory.load(args.mem)
    _, raw, texts = _load_captions(args.captions, mem.dim, cfg.seed)
    model = Captioner(cfg, mem, decoder_vocab_for(texts))
    captions = model.encode_captions(texts)
    opt = model.make_optimizer()
    n = len(captions)
    for step in range(cfg.max_steps):
        start = (step * cfg.batch_size) % n
        idx = [(start + i) % n for i in range(min(cfg.batch_size, n))]
        lr = opt.lr
        loss = train_step(model, raw[idx], [captions[i] for i in idx], opt)
        if step % args.log_every == 0 or step == cfg.max_steps - 1:
            print(f"step {step} loss {loss:.6f} lr {lr:.6e}", flush=True)
    print(f"final loss {model.loss(raw, captions):.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        checkpoint.save_fusion(
            os.path.join(args.out, "fusion.evcf"), model.fusion.cfg, model.name_vocab,
            model.decoder.vocab, model.trainables.t_obj.value,
        )
        checkpoint.save_trainables(os.path.join(args.out, "trainables.evct"), model.trainables, opt)
        print(f"saved checkpoint to {args.out}")
    return 0


def _load_model(args) -> Captioner:
    cfg = _config(args)
    mem = memory.load(args.mem)
    fcfg, name_vocab, dec_vocab, _ = checkpoint.load_fusion(os.path.join(args.ckpt, "fusion.evcf"))
    if fcfg != cfg.fusion_config(mem.dim):
        raise ConfigError("checkpoint fusion settings do not match --config / --mem")
    model = Captioner(cfg, mem, dec_vocab, name_vocab)
    arrays, _, _, _ = checkpoint.load_trainables(os.path.join(args.ckpt, "trainables.evct"))
    checkpoint.restore_trainables(model.trainables, arrays)
    return model


def cmd_generate(args) -> int:
    model = _load_model(args)
    if args.features:
        items = read_features(args.features, model.memory.dim)
    elif args.captions:
        ids, raw, _ = _load_captions(args.captions, model.memory.dim, model.cfg.seed)
        items = list(zip(ids, raw))
    else:
        enc = PseudoEncoder(seed=model.cfg.seed, dim=model.memory.dim)
        items = [(i, enc.encode(i)) for i in _read_ids(args)]
    beam = args.beam_size or model.cfg.beam_size
    for image_id, block in items:
        text, hyp = model.caption(block, beam)
        print(f"{image_id}\t{text}\t{hyp.score:.6f}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    logging.basicConfig(level=logging.INFO)
    serve(memory.load(args.mem), args.port, args.host, args.k)
    return 0


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(add_help=False)
    top.add_argument("--seed", type=int, default=None, help="override the configured seed")
    top.add_argument("--config", default=None, help="key = value configuration file")
    # repeated on each subcommand; SUPPRESS keeps a subcommand from resetting a global value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="ragcap", parents=[top], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", parents=[common], help="build a memory from JSON-lines records")
    p.add_argument("--input", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("expand", parents=[common], help="append records to a memory file")
    p.add_argument("--mem", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output path (default: overwrite --mem)")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("stats", parents=[common], help="print memory statistics")
    p.add_argument("mem")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("retrieve", parents=[common], help="top-K names for each feature block")
    p.add_argument("--mem", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("encode", parents=[common], help="pseudo-encode image ids into a feature file")
    p.add_argument("ids", nargs="*")
    p.add_argument("--ids-file")
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--out")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("demo-data", parents=[common], help="write a toy memory/caption corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--n", type=int, default=20)
    p.set_defaults(func=cmd_demo_data)

    p = sub.add_parser("demo-train", parents=[common], help="train T_img, T_obj and phi on a caption file")
    p.add_argument("--captions", required=True)
    p.add_argument("--mem", required=True)
    p.add_argument("--out", help="directory for fusion.evcf / trainables.evct")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_demo_train)

    p = sub.add_parser("generate", parents=[common], help="caption images with a trained checkpoint")
    p.add_argument("ids", nargs="*")
    p.add_argument("--ids-file")
    p.add_argument("--mem", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features")
    p.add_argument("--captions", help="caption file whose features/ids to caption")
    p.add_argument("--beam-size", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("serve", parents=[common], help="HTTP retrieval service")
    p.add_argument("--mem", required=True)
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RagcapError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"ragcap {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
