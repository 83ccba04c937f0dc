"""Command-line interface: init, train, eval, generate, stats, count-params,
selftest.

Configuration comes from an optional key=value text file (one pair per
line, ``#`` comments) holding any model or training field, overridden by
command-line flags.  The SNNLM_THREADS environment variable caps BLAS
threads when threadpoolctl is available.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from snnlm import sample_text, selftest, stats, tokenizer, trainer
from snnlm.model import Model, ModelConfig, count_params, load_checkpoint, \
    save_checkpoint
from snnlm.trainer import TrainConfig, Trainer, evaluate, generate, \
    stats_csv_row, CSV_COLUMNS

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


def _apply_thread_limit() -> None:
    raw = os.environ.get("SNNLM_THREADS")
    if not raw:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(raw))
    except (ImportError, ValueError):
        pass


def parse_config_file(path) -> Dict[str, object]:
    """key=value lines -> typed dict (int, then float, then string)."""
    out: Dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _MODEL_FIELDS and key not in _TRAIN_FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = int(value)
        except ValueError:
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out


def build_configs(args) -> Tuple[ModelConfig, TrainConfig]:
    file_cfg = parse_config_file(args.config) if getattr(args, "config", None) \
        else {}
    model_kw = {k: v for k, v in file_cfg.items() if k in _MODEL_FIELDS}
    train_kw = {k: v for k, v in file_cfg.items() if k in _TRAIN_FIELDS}
    for flag, key in (("seed", "seed"), ("context", "context_len")):
        value = getattr(args, flag, None)
        if value is not None:
            model_kw[key] = value
            if key in _TRAIN_FIELDS:
                train_kw[key] = value
    for flag, key in (("steps", "total_steps"), ("batch", "batch_size"),
                      ("lr", "peak_lr"), ("warmup", "warmup_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            train_kw[key] = value
    # seed is shared unless set separately in the file
    if "seed" in model_kw and "seed" not in train_kw:
        train_kw["seed"] = model_kw["seed"]
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def _load_corpus_arg(paths: Optional[List[str]], out_dir: Optional[Path],
                     seed: int) -> np.ndarray:
    if paths:
        return tokenizer.load_corpus(paths)
    # fall back to the packaged deterministic sample corpus
    text = sample_text.generate_text(1_000_000, seed=seed)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sample_corpus.txt").write_text(text)
    return tokenizer.corpus_from_text(text)


def cmd_init(args) -> int:
    model_cfg, _ = build_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = Model(model_cfg)
    path = out_dir / "model.ckpt"
    save_checkpoint(model, path)
    print(f"initialized {model.store.total_params():,} parameters -> {path}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = build_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_paths = args.corpus or \
        ([train_cfg.corpus_path] if train_cfg.corpus_path else None)
    ids = _load_corpus_arg(corpus_paths, out_dir, train_cfg.seed)
    split = max(int(ids.size * (1.0 - train_cfg.eval_fraction)),
                train_cfg.context_len + 1)
    train_ids, eval_ids = ids[:split], ids[split:]

    if args.resume:
        model = load_checkpoint(args.resume)
    else:
        model = Model(model_cfg)
    run = Trainer(model, train_cfg, train_ids)
    metrics_path = out_dir / "metrics.csv"
    t0 = time.perf_counter()
    with open(metrics_path, "w") as f:
        f.write(",".join(CSV_COLUMNS) + "\n")

        def on_record(record):
            if record.step % train_cfg.log_every == 0 or record.step == 1:
                f.write(stats_csv_row(record) + "\n")
                f.flush()
                print(f"step {record.step:5d}  loss {record.loss:.4f}  "
                      f"ce {record.ce:.4f}  lr {record.lr:.2e}  "
                      f"{record.tokens_per_sec:.0f} tok/s")

        try:
            run.train(train_cfg.total_steps, on_record)
        except trainer.TrainingAborted as e:
            print(f"aborted: {e}", file=sys.stderr)
            return 2
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt)
    print(f"trained {train_cfg.total_steps} steps in "
          f"{time.perf_counter() - t0:.0f}s -> {ckpt}")
    if eval_ids.size > train_cfg.context_len + 1:
        print(f"eval ce: {evaluate(model, eval_ids):.4f} nats "
              f"(unigram entropy {tokenizer.unigram_entropy(ids):.4f})")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    ids = tokenizer.load_corpus(args.corpus)
    ce = evaluate(model, ids)
    print(f"cross-entropy: {ce:.4f} nats/token "
          f"({ce / np.log(2):.4f} bits/token)")
    print(f"unigram entropy of stream: {tokenizer.unigram_entropy(ids):.4f} nats")
    return 0


def cmd_generate(args) -> int:
    model = load_checkpoint(args.ckpt)
    prompt = tokenizer.corpus_from_text(args.prompt.encode("utf-8"))
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    out = generate(model, prompt, args.max_new,
                   temperature=args.temperature, rng=rng)
    # byte stream rendered as text; non-UTF8 bytes appear as \xNN escapes
    print(tokenizer.detokenize(out).decode("utf-8", errors="backslashreplace"))
    return 0


def cmd_stats(args) -> int:
    model = load_checkpoint(args.ckpt)
    ids = tokenizer.load_corpus(args.corpus)
    paths = stats.stats_dump(model, ids, args.out, max_tokens=args.max_tokens)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_count_params(args) -> int:
    if args.full_scale:
        cfg = ModelConfig.full_scale()
    else:
        cfg, _ = build_configs(args)
    counts = count_params(cfg)
    width = max(len(k) for k in counts)
    for key, value in counts.items():
        print(f"{key:<{width}}  {value:>15,}  ({value / 1e6:.1f}M)")
    return 0


def cmd_selftest(args) -> int:
    return selftest.main(fast=args.fast)


def main(argv: Optional[List[str]] = None) -> int:
    _apply_thread_limit()
    parser = argparse.ArgumentParser(
        prog="snnlm",
        description="Train and probe a spiking state-space language model.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("init", help="initialize and save a fresh model")
    add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("train", help="train on byte corpora")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", nargs="*", default=None,
                   help="raw text/byte files (default: packaged sample text)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--context", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="cross-entropy on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="sample a continuation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--max-new", type=int, default=200)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("stats", help="dump diagnostics CSVs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-tokens", type=int, default=None)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("count-params", help="closed-form parameter breakdown")
    add_common(p)
    p.add_argument("--full-scale", action="store_true",
                   help="use the published 874M configuration")
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("selftest", help="run the verification suites")
    p.add_argument("--fast", action="store_true")
    p.set_defaults(fn=cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
