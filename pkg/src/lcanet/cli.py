"""``lcanet`` command line: gen-data, train, eval, decode, gradcheck, shapes.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import VARIANTS, ConfigError, RunConfig, load_config, table1_config, to_dict
from .data import SPLITS, DataError, generate, pad_batch, read_dataset, read_vseq, write_dataset
from .tensor import DimensionError, NumericError
from .training import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lcanet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _dataset_dir(root: Path, split: str) -> Path:
    return root / split if (root / split / "manifest.tsv").exists() else root


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    splits = generate(cfg.data, cfg.grammar, cfg.render, cfg.seed)
    try:
        for name in SPLITS:
            write_dataset(splits[name], out / name)
        (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2))
    except OSError as err:
        raise DataError(f"cannot write dataset to {out}: {err}") from None
    print(" ".join(f"{name}={len(splits[name])}" for name in SPLITS), f"-> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .models import build_model
    from .training import train

    cfg = _config(args)
    if args.variant is not None:
        cfg.model.variant = args.variant.lower()
    if args.lam is not None:
        cfg.model.ce_lambda = args.lam
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.threads is not None:
        cfg.train.threads = args.threads
    cfg.model.validate()
    if args.lam is not None and not cfg.model.uses_ce:
        raise ConfigError(f"--lambda only applies to ah-ctc-ce, not {cfg.model.variant}")
    root = Path(args.data)
    train_set = read_dataset(root / "train")
    val_set = read_dataset(root / "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = to_dict(cfg)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    dtype = np.dtype(cfg.train.precision)
    model = build_model(cfg.model, seed=cfg.seed, dtype=dtype)
    resume = args.resume
    if resume is None and args.resume_last and (out / "last.lckp").exists():
        resume = out / "last.lckp"
    result = train(model, train_set, val_set, cfg.train, cfg.seed, out, resume=resume,
                   on_epoch=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    if not result.history:
        raise NumericError("no epoch completed")
    last = result.history[-1]
    if not np.isfinite(last["train_loss"]):
        raise NumericError(f"training diverged: train loss {last['train_loss']}")
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.4f} -> {out / 'best.lckp'}")
    return EXIT_OK


def _decode_set(model, samples, beam: int, batch_size: int = 16):
    from .models import decode_batch

    preds = []
    for i in range(0, len(samples), batch_size):
        frames, lengths, _ = pad_batch(samples[i:i + batch_size])
        frames = frames.astype(model.encoder.conv[0].kernel.dtype)
        preds += [h[0][0] for h in decode_batch(model, frames, lengths, beam_width=beam)]
    return preds


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate

    model, _, _ = load_checkpoint(args.checkpoint)
    samples = read_dataset(_dataset_dir(Path(args.data), args.split))
    if not samples:
        raise DataError(f"no samples in {args.data}")
    preds = _decode_set(model, samples, args.beam)
    refs = preds if args.self_reference else [s.transcript for s in samples]
    empty = [s.id for s, r in zip(samples, refs) if not r.split()]
    if empty:
        raise DataError(f"empty reference transcript for sample {empty[0]} ({len(empty)} in total)")
    report = evaluate([s.id for s in samples], preds, refs, args.beam)
    summary = report.summary()
    print(json.dumps(summary, sort_keys=True))
    if args.report:
        full = dict(summary, variant=model.config.variant, checkpoint=str(args.checkpoint),
                    samples=[vars(s) for s in report.samples])
        Path(args.report).write_text(json.dumps(full, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_decode(args) -> int:
    from .checkpoint import load_checkpoint
    from .models import decode_batch

    model, _, _ = load_checkpoint(args.checkpoint)
    frames = read_vseq(args.input)
    if frames.ndim != 4:
        raise DataError(f"{args.input}: expected (C, T, H, W) frames, got shape {frames.shape}")
    frames = frames.astype(model.encoder.conv[0].kernel.dtype)
    hyps = decode_batch(model, frames[None], np.array([frames.shape[1]]), beam_width=args.beam, topk=args.topk)[0]
    if args.topk == 1:
        print(hyps[0][0])
    else:
        for text, logp in hyps:
            print(f"{logp:.6f}\t{text}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import format_rows, run_gradchecks
    from .tensor import clear_faults, inject_fault

    for op in args.inject_fault or []:
        inject_fault(op)
    try:
        rows = run_gradchecks(args.variant, args.seed, args.coords)
    finally:
        clear_faults()
    print(format_rows(rows))
    failed = [r.name for r in rows if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _table_form(shape) -> str:
    # Table 1 writes frame tensors as T x W x H x C
    if len(shape) == 4:
        c, t, h, w = shape
        return f"{t}x{w}x{h}x{c}"
    return "x".join(str(d) for d in shape)


def cmd_shapes(args) -> int:
    from .models import build_model, shape_trace

    if args.table1:
        if args.config:
            cfg = load_config(args.config)
            if not cfg.model.table1:
                raise ConfigError("--table1 given but the config sets model.table1 = false")
            model_cfg = cfg.model
        else:
            model_cfg = table1_config(args.variant)
    else:
        model_cfg = _config(args).model
        if args.variant:
            model_cfg.variant = args.variant
        model_cfg.validate()
    model = build_model(model_cfg, seed=0)
    for name, shape in shape_trace(model, args.frames):
        print(f"{name:<14} {'x'.join(map(str, shape)):<16} {_table_form(shape)}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcanet", description="Attention-CTC lipreading on synthetic clips.")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (1 = reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=VARIANTS, type=str.lower)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from (last.lckp)")
    t.add_argument("--resume-last", action="store_true", help="continue from OUT/last.lckp when present")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode a dataset and report CER / WER / BLEU")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--beam", type=int, default=10)
    e.add_argument("--report")
    e.add_argument("--self-reference", action="store_true", help=argparse.SUPPRESS)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="transcribe one VSEQ clip")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--beam", type=int, default=10)
    d.add_argument("--topk", type=int, default=1)
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    c.add_argument("--variant", choices=VARIANTS, default="ah-ctc", type=str.lower)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--coords", type=int, default=100)
    c.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("shapes", help="print the layer shape trace")
    s.add_argument("--table1", action="store_true")
    s.add_argument("--config")
    s.add_argument("--variant", choices=VARIANTS, type=str.lower)
    s.add_argument("--frames", type=int, help="clip length (75 for --table1, 64 otherwise)")
    s.set_defaults(func=cmd_shapes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command in ("shapes",) and getattr(args, "variant", None) is None:
        args.variant = "ah-ctc" if args.table1 else None
    threads = args.threads
    if threads is None and args.command == "train":
        threads = _config(args).train.threads
    try:
        with threadpool_limits(threads):
            return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"lcanet: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, TrainingError) as err:
        print(f"lcanet: error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as err:
        print(f"lcanet: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except DimensionError as err:
        print(f"lcanet: shape error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
