"""Command line: gen-corpus, validate, train, generate, bench.

Exit codes: 0 ok, 1 usage or config error, 2 I/O error, 3 validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import run_bench
from .checkpoint import load_checkpoint
from .config import RunConfig, dump_config, load_config
from .corpus import default_vocabulary, generate_mixture, load_jsonl, read_manifest, write_jsonl, write_manifest
from .engine import generate_ar, generate_diffusion, generate_planned
from .errors import ConfigError, LengthOverflow
from .tags import TagError, Vocabulary, is_word, round_up10
from .train import train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVALID = 0, 1, 2, 3
GEN_METHODS = ("ar", "diffusion", "pd", "pd-da")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [corpus] [model] [train] [generate] [bench] sections")
    common.add_argument("--seed", type=int, help="seed for corpus, training and decoding")
    common.add_argument("--method", choices=GEN_METHODS + ("pd-tau",))
    common.add_argument("--steps-ratio", type=float, dest="steps_ratio")
    common.add_argument("--confidence", type=float, help="confidence threshold; enables threshold unmasking")
    common.add_argument("--length-scale", type=float, dest="length_scale")
    common.add_argument("--mask-mode", choices=("isolated", "dense"), dest="mask_mode")
    common.add_argument("--max-len", type=int, dest="max_len", help="cap on total sequence length (default 2048)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value")

    p = argparse.ArgumentParser(prog="plandiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-corpus", parents=[common], help="write synthetic train/held-out corpora")
    g.add_argument("--out", help="output directory (default [corpus] out_dir)")
    g.add_argument("-n", type=int, help="number of training documents")
    v = sub.add_parser("validate", parents=[common], help="validate an annotated JSONL file")
    v.add_argument("path")
    t = sub.add_parser("train", parents=[common], help="train one method's model")
    t.add_argument("--corpus", help="corpus directory (default [corpus] out_dir)")
    t.add_argument("--out", help="run directory (default [train] out_dir/<method>)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--steps", type=int)
    gen = sub.add_parser("generate", parents=[common], help="generate for each prompt of a file")
    gen.add_argument("prompts", help="text file, one whitespace-tokenized prompt per line")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--out", help="output directory (default [generate] out_dir)")
    gen.add_argument("--canvas", type=int, default=0, help="canvas length for the diffusion method")
    b = sub.add_parser("bench", parents=[common], help="run the benchmark grid on held-out prompts")
    b.add_argument("--corpus", help="corpus directory with heldout.jsonl")
    b.add_argument("--runs", help="directory holding <method>/final.ckpt (default [train] out_dir)")
    b.add_argument("--out", help="report directory (default [bench] out_dir)")
    b.add_argument("--methods", help="comma-separated subset of ar,diffusion,pd,pd-da,pd-tau")
    b.add_argument("--n", type=int, help="number of held-out prompts")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg = cfg.set(section.strip(), name.strip(), value.strip())
    if args.seed is not None:
        for section in ("corpus", "train", "generate"):
            cfg = cfg.set(section, "seed", args.seed)
    if args.method is not None:
        if args.method in ("ar", "diffusion", "pd", "pd-da"):
            cfg = cfg.set("train", "method", args.method)
        cfg = cfg.set("generate", "method", "pd" if args.method == "pd-tau" else args.method)
        if args.method == "pd-tau" and args.confidence is None and cfg.generate.confidence == 0:
            cfg = cfg.set("generate", "confidence", 0.9)
    if args.steps_ratio is not None:
        cfg = cfg.set("generate", "steps_ratio", args.steps_ratio)
        cfg = cfg.set("bench", "steps_ratios", (args.steps_ratio,))
    if args.confidence is not None:
        cfg = cfg.set("generate", "confidence", args.confidence)
        cfg = cfg.set("bench", "confidences", (args.confidence,))
    if args.length_scale is not None:
        cfg = cfg.set("generate", "length_scale", args.length_scale)
        cfg = cfg.set("bench", "length_scales", (args.length_scale,))
    if args.mask_mode is not None:
        cfg = cfg.set("generate", "mask_mode", args.mask_mode)
    if args.max_len is not None:
        cfg = cfg.set("generate", "max_total_len", args.max_len)
    cfg.generation_config()  # surface invalid decoding settings before any work
    return cfg


def _corpus_dir(args, cfg: RunConfig) -> Path:
    return Path(getattr(args, "corpus", None) or cfg.corpus.out_dir)


def cmd_gen_corpus(args, cfg: RunConfig, out=print) -> int:
    if args.n is not None:
        cfg = cfg.set("corpus", "n_train", args.n)
    c = cfg.corpus
    specs = c.specs()  # raises ConfigError before anything is written
    vocab = default_vocabulary()
    rng = np.random.default_rng(c.seed)
    train_docs = generate_mixture(specs, c.n_train, rng, vocab)
    held = generate_mixture(specs, c.n_heldout, rng, vocab, exclude={d.prompt for d in train_docs})
    d = Path(args.out or c.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_jsonl(d / "train.jsonl", train_docs, vocab)
    write_jsonl(d / "heldout.jsonl", held, vocab)
    write_manifest(d / "manifest.txt", {
        "seed": c.seed, "count": len(train_docs), "heldout_count": len(held),
        "span_len_range": f"{c.span_min},{c.span_max}", "sync_probability": c.sync_probability,
        "specs": json.dumps([s.template_id.value + f"x{s.num_spans}" for s in specs]),
        "config_digest": cfg.digest(),
    })
    out(f"wrote {len(train_docs)} training and {len(held)} held-out documents to {d}")
    return EXIT_OK


def cmd_validate(args, cfg: RunConfig, out=print) -> int:
    docs, rejects = load_jsonl(args.path)
    for line_no, _, (rule, pos, msg) in rejects:
        out(f"{args.path}:{line_no}: {rule} at token {pos}: {msg}")
    out(f"{len(docs)} valid, {len(rejects)} rejected")
    return EXIT_INVALID if rejects else EXIT_OK


def _load_docs(path: Path):
    docs, rejects = load_jsonl(path)
    if rejects:
        line_no, _, (rule, pos, msg) = rejects[0]
        raise TagError(f"{path}:{line_no}: {rule} at token {pos}: {msg}", pos, rule)
    return docs


def cmd_train(args, cfg: RunConfig, out=print) -> int:
    if args.steps is not None:
        cfg = cfg.set("train", "steps", args.steps)
    docs = _load_docs(_corpus_dir(args, cfg) / "train.jsonl")
    vocab = default_vocabulary()
    tcfg = cfg.train_config()
    run_dir = Path(args.out or Path(cfg.train.out_dir) / tcfg.method)
    train(docs, cfg.model_config(vocab.size), tcfg, run_dir, resume=args.resume, log=out,
          meta={"run_config": cfg.to_dict()})
    (run_dir / "run_config.ini").write_text(dump_config(cfg))
    out(f"checkpoint written to {run_dir / 'final.ckpt'}")
    return EXIT_OK


def _read_prompts(path: Path, vocab: Vocabulary) -> list[list[int]]:
    prompts = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        ids = vocab.encode(line)
        if not all(is_word(t) for t in ids):
            raise TagError(f"{path}:{i}: prompts must contain words only", i)
        prompts.append(ids)
    return prompts


def cmd_generate(args, cfg: RunConfig, out=print) -> int:
    vocab = default_vocabulary()
    prompts = _read_prompts(Path(args.prompts), vocab)
    ck = load_checkpoint(args.checkpoint)
    gcfg = cfg.generation_config()
    method = cfg.generate.method
    d = Path(args.out or cfg.generate.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    header = {"config": cfg.to_dict(), "checkpoint": ck.content_hash, "method": method}
    with open(d / "results.jsonl", "w") as res_fh, open(d / "traces.jsonl", "w") as tr_fh:
        tr_fh.write(json.dumps({"header": header}) + "\n")
        for i, prompt in enumerate(prompts):
            run_cfg = type(gcfg)(**{**gcfg.__dict__, "seed": gcfg.seed + i})
            try:
                if method == "ar":
                    r = generate_ar(ck.model, prompt, run_cfg)
                elif method == "diffusion":
                    r = generate_diffusion(ck.model, prompt, args.canvas or round_up10(4 * len(prompt)), run_cfg)
                else:
                    r = generate_planned(ck.model, prompt, run_cfg)
            except LengthOverflow as e:
                res_fh.write(json.dumps({"prompt": vocab.decode(prompt), "error": f"LengthOverflow: {e}",
                                         "checkpoint": ck.content_hash}) + "\n")
                continue
            res_fh.write(json.dumps({
                "prompt": vocab.decode(prompt), "raw": vocab.decode(r.raw), "stripped": vocab.decode(r.stripped),
                "critical_path": r.trace.critical_path, "tokens_generated": len(r.raw),
                "checkpoint": ck.content_hash, "config_digest": cfg.digest(),
            }) + "\n")
            for rec in r.trace.denoise_records:
                tr_fh.write(json.dumps({"prompt": i, **rec}) + "\n")
            tr_fh.write(json.dumps({"prompt": i, "mask_mode": r.trace.mask_mode, "totals": r.totals(),
                                    "truncated": r.truncated, "events": [e.to_dict() for e in r.trace.events]}) + "\n")
    (d / "results.meta.json").write_text(json.dumps(header, indent=2) + "\n")
    out(f"wrote {len(prompts)} results to {d / 'results.jsonl'}")
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig, out=print) -> int:
    if args.methods:
        cfg = cfg.set("bench", "methods", args.methods)
    if args.n is not None:
        cfg = cfg.set("bench", "n_prompts", args.n)
    docs = _load_docs(_corpus_dir(args, cfg) / "heldout.jsonl")[: cfg.bench.n_prompts]
    runs = Path(args.runs or cfg.train.out_dir)
    bcfg = cfg.bench_config()
    models, hashes = {}, {}
    for family in sorted({c.checkpoint_family for c in bcfg.cells()}):
        ck = load_checkpoint(runs / family / "final.ckpt")
        models[family], hashes[family] = ck.model, ck.content_hash
    report, _ = run_bench(models, docs, bcfg, cfg.generation_config(), cfg.to_dict(), hashes)
    csv_path, json_path = report.write(args.out or cfg.bench.out_dir)
    for row in report.rows:
        out(", ".join(f"{k}={v}" for k, v in row.items()))
    out(f"report written to {csv_path} and {json_path}")
    return EXIT_OK


COMMANDS = {"gen-corpus": cmd_gen_corpus, "validate": cmd_validate, "train": cmd_train,
            "generate": cmd_generate, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TagError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, UnicodeDecodeError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
