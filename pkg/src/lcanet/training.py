"""Adam, global-norm clipping and the epoch loop with early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .checkpoint import load_state, read_checkpoint, save_checkpoint
from .config import TrainConfig
from .ctc import min_frames
from .data import Sample, pad_batch
from .metrics import corpus_cer
from .models import Model, decode_batch, model_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training cannot start or continue."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": a for k, a in self.m.items()}
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for key, arr in tensors.items():
            if key.startswith("optim.m."):
                self.m[key[len("optim.m."):]] = arr.copy()
            elif key.startswith("optim.v."):
                self.v[key[len("optim.v."):]] = arr.copy()


def adam_step(params: dict[str, tn.Tensor], grads: dict[str, np.ndarray], state: AdamState) -> bool:
    """Bias-corrected Adam update in place. Returns False (and skips) on a non-finite gradient."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter is {params[name].shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient in %s; step %d skipped", name, state.step + 1)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = (p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return True


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * np.asarray(s, dtype=grads[k].dtype)
    return norm


def loss_and_grads(model: Model, frames, lengths, transcripts, rng) -> tuple[float, dict[str, np.ndarray]]:
    params = model.named_parameters()
    with tn.Tape() as tape:
        loss = model_loss(model, frames, transcripts, lengths, mode="train", rng=rng)
    value = float(loss.data)
    if not math.isfinite(value):
        return value, {}
    grads = tape.backward(loss)
    return value, {name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()}


def filter_feasible(model: Model, samples: Sequence[Sample]) -> list[Sample]:
    """Drop clips too short for their transcript under CTC; warns with the count."""
    keep = [s for s in samples if min_frames(model.vocab.encode(s.transcript)) <= s.length]
    if len(keep) < len(samples):
        log.warning("%d of %d samples are infeasible for CTC and were skipped", len(samples) - len(keep), len(samples))
    return keep


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def evaluate_loss(model: Model, samples: Sequence[Sample], batch_size: int) -> tuple[float, float]:
    """Mean batch loss and greedy-decode CER in eval mode."""
    losses, preds, refs = [], [], []
    for idx in _batches(len(samples), batch_size, None):
        frames, lengths, texts = pad_batch([samples[i] for i in idx])
        losses.append(float(model_loss(model, frames, texts, lengths, mode="eval").data))
        hyps = decode_batch(model, frames, lengths, greedy=True)
        preds += [h[0][0] for h in hyps]
        refs += texts
    return float(np.mean(losses)), corpus_cer(preds, refs)


@dataclass
class TrainResult:
    history: list[dict]
    best_val_loss: float
    best_epoch: int
    stopped_early: bool


def train(model: Model, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig,
          seed: int, out_dir: str | Path, resume: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train in place; writes ``best.lckp``, ``last.lckp`` and ``history.jsonl`` under ``out_dir``.

    Shuffling and dropout draw from a generator seeded by (seed, epoch), so a
    resumed run sees the same batches as an uninterrupted one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not train_set:
        raise TrainingError("training set is empty")
    train_set = filter_feasible(model, train_set)
    val_set = filter_feasible(model, val_set)
    if not train_set:
        raise TrainingError("every training sample is infeasible for CTC")
    if not val_set:
        raise TrainingError("validation set is empty")

    params = model.named_parameters()
    state = AdamState(lr=cfg.learning_rate)
    history: list[dict] = []
    start, best_val, best_epoch, bad = 1, math.inf, 0, 0
    hist_path = out_dir / "history.jsonl"
    if resume is not None:
        meta, tensors = read_checkpoint(resume)
        load_state(model, tensors, str(resume))
        state.load_tensors(tensors)
        t = meta.get("train", {})
        state.step, state.skipped = t.get("step", 0), t.get("skipped", 0)
        start = t.get("epoch", 0) + 1
        best_val, best_epoch, bad = t.get("best_val", math.inf), t.get("best_epoch", 0), t.get("bad_epochs", 0)
        if hist_path.exists():
            history = [json.loads(x) for x in hist_path.read_text().splitlines() if x.strip()]
            history = [h for h in history if h["epoch"] < start]
    hist_path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    reached = next((h["epoch"] for h in history if h["train_loss"] < cfg.loss_threshold), None)

    stopped = False
    for epoch in range(start, cfg.epochs + 1):
        if bad >= cfg.patience:
            stopped = True
            break
        rng = np.random.default_rng([seed, epoch])
        losses = []
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            frames, lengths, texts = pad_batch([train_set[i] for i in idx])
            value, grads = loss_and_grads(model, frames, lengths, texts, rng)
            if not grads:
                state.skipped += 1
                log.warning("epoch %d: non-finite loss %r, batch skipped", epoch, value)
                continue
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state)
            losses.append(value)
        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss, val_cer = evaluate_loss(model, val_set, cfg.batch_size)
        if reached is None and train_loss < cfg.loss_threshold:
            reached = epoch
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_cer": val_cer,
                  "epochs_to_threshold": reached, "skipped_steps": state.skipped}
        history.append(record)
        with open(hist_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if val_loss < best_val:
            best_val, best_epoch, bad = val_loss, epoch, 0
            save_checkpoint(out_dir / "best.lckp", model, {"epoch": epoch, "val_loss": val_loss})
        else:
            bad += 1
        train_meta = {"epoch": epoch, "step": state.step, "skipped": state.skipped, "best_val": best_val,
                      "best_epoch": best_epoch, "bad_epochs": bad, "seed": seed}
        save_checkpoint(out_dir / "last.lckp", model, {"train": train_meta}, state.tensors())
        if on_epoch is not None:
            on_epoch(record)
        if bad >= cfg.patience:
            stopped = True
            break
    return TrainResult(history, best_val, best_epoch, stopped)
