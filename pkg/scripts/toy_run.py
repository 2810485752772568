"""Train one variant on the default toy dataset and report held-out metrics.

    python3 scripts/toy_run.py --variant ah-ctc --seed 0 --out runs/ah-ctc-s0
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from lcanet.checkpoint import load_checkpoint
from lcanet.config import load_config
from lcanet.data import generate, pad_batch
from lcanet.metrics import evaluate
from lcanet.models import build_model, decode_batch
from lcanet.training import train


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "toy.toml"))
    ap.add_argument("--variant", default="ah-ctc")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=None)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    cfg.model.variant = args.variant
    cfg.model.validate()
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    data_seed = cfg.seed if args.data_seed is None else args.data_seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    c0 = time.process_time()
    with threadpool_limits(cfg.train.threads):
        splits = generate(cfg.data, cfg.grammar, cfg.render, data_seed)
        model = build_model(cfg.model, seed=args.seed, dtype=np.dtype(cfg.train.precision))

        def report(rec):
            logging.info("%s  %.0fs", json.dumps(rec), time.time() - t0)

        result = train(model, splits["train"], splits["val"], cfg.train, args.seed, out, on_epoch=report)
        train_seconds = time.time() - t0
        train_cpu_seconds = time.process_time() - c0
        best, _, _ = load_checkpoint(out / "best.lckp", dtype=np.dtype(cfg.train.precision))
        test = splits["test"]
        preds = []
        for i in range(0, len(test), cfg.train.batch_size):
            frames, lengths, _ = pad_batch(test[i:i + cfg.train.batch_size])
            preds += [h[0][0] for h in decode_batch(best, frames, lengths, beam_width=cfg.decode.beam_width)]
        rep = evaluate([s.id for s in test], preds, [s.transcript for s in test], cfg.decode.beam_width)
    summary = {
        "variant": args.variant, "seed": args.seed, "epochs_run": len(result.history),
        "best_epoch": result.best_epoch, "train_seconds": train_seconds,
        "train_cpu_seconds": train_cpu_seconds,
        "epochs_to_threshold": result.history[-1]["epochs_to_threshold"], **rep.summary(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    logging.info(json.dumps(summary))
    return summary


if __name__ == "__main__":
    main()
