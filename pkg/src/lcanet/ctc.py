"""Connectionist temporal classification: loss, oracle, collapse and decoders.

All losses consume per-frame probability distributions (softmax outputs),
not logits; the gradient flows back through whatever produced them.
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, as_tensor
from .tensor.core import DimensionError, make_node

BLANK = 0
_LOG_FLOOR = 1e-300


class VocabularyError(ValueError):
    """A transcript contains a symbol outside the vocabulary."""


class FeasibilityError(ValueError):
    """No length-T path collapses to the requested target."""


@dataclass(frozen=True)
class Vocabulary:
    """Character inventory; index 0 is the CTC blank and never a transcript symbol."""

    symbols: tuple[str, ...]
    blank_char: str = "-"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")
        if self.blank_char in self.symbols:
            raise ValueError(f"blank character {self.blank_char!r} also listed as a symbol")
        object.__setattr__(self, "_index", {c: i + 1 for i, c in enumerate(self.symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    def __len__(self) -> int:
        return self.size

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as err:
            raise VocabularyError(f"character {err.args[0]!r} not in vocabulary") from None

    def decode(self, indices: Iterable[int]) -> str:
        out = []
        for i in indices:
            i = int(i)
            if i == BLANK:
                out.append(self.blank_char)
            elif 0 < i < self.size:
                out.append(self.symbols[i - 1])
            else:
                raise VocabularyError(f"index {i} outside vocabulary of size {self.size}")
        return "".join(out)

    def path(self, text: str) -> list[int]:
        """Parse a path written with ``blank_char`` for blanks, e.g. ``"x--y-z"``."""
        return [BLANK if c == self.blank_char else self.encode(c)[0] for c in text]


def default_vocabulary() -> Vocabulary:
    """Blank, a-z, space: 28 symbols."""
    return Vocabulary(tuple(string.ascii_lowercase) + (" ",))


# ------------------------------------------------------------------ collapse

def collapse_indices(path: Sequence[int], blank: int = BLANK) -> list[int]:
    out: list[int] = []
    prev = None
    for s in path:
        s = int(s)
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def collapse(path: Sequence[int] | str, vocab: Vocabulary) -> str:
    """Merge adjacent repeats, then drop blanks."""
    if isinstance(path, str):
        path = vocab.path(path)
    return vocab.decode(collapse_indices(path))


def min_frames(target: Sequence[int]) -> int:
    """Shortest path length that can emit ``target`` (repeats need a blank between)."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def check_feasible(n_frames: int, target: Sequence[int]) -> None:
    if len(target) == 0:
        raise FeasibilityError("empty target")
    need = min_frames(target)
    if n_frames < need:
        raise FeasibilityError(f"target of length {len(target)} needs {need} frames, got {n_frames}")


# ---------------------------------------------------------------- DP kernels

def _extended(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Blank-interleaved labels padded to a common width, their lengths and skip masks."""
    n = len(targets)
    s_len = np.array([2 * len(t) + 1 for t in targets])
    s_max = int(s_len.max())
    ext = np.zeros((n, s_max), dtype=np.int64)
    skip = np.zeros((n, s_max), dtype=bool)
    for i, tgt in enumerate(targets):
        tgt = np.asarray(tgt, dtype=np.int64)
        ext[i, 1:2 * len(tgt):2] = tgt
        # s-2 -> s allowed when l'_s is a label differing from l'_{s-2}
        for j in range(1, len(tgt)):
            skip[i, 2 * j + 1] = tgt[j] != tgt[j - 1]
    return ext, s_len, skip


def ctc_forward_backward(log_probs: np.ndarray, targets: Sequence[Sequence[int]],
                         lengths: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Log-space alpha/beta recursions for a padded batch.

    ``log_probs`` is (N, T, V). Returns (log_alpha, log_beta, log_likelihood,
    extended_labels); alpha and beta are (N, T, S) and both include the
    emission at their own frame.
    """
    n, t_max, _ = log_probs.shape
    lengths = np.asarray(lengths)
    ext, s_len, skip = _extended(targets)
    s_max = ext.shape[1]
    valid_s = np.arange(s_max)[None, :] < s_len[:, None]
    emit = np.take_along_axis(log_probs, np.broadcast_to(ext[:, None, :], (n, t_max, s_max)), axis=2)
    emit = np.where(valid_s[:, None, :], emit, -np.inf)
    neg = np.full((n, 1), -np.inf)

    alpha = np.full((n, t_max, s_max), -np.inf)
    a = np.full((n, s_max), -np.inf)
    a[:, 0] = emit[:, 0, 0]
    a[:, 1] = emit[:, 0, 1]
    alpha[:, 0] = a
    for t in range(1, t_max):
        prev1 = np.concatenate([neg, a[:, :-1]], axis=1)
        prev2 = np.where(skip, np.concatenate([neg, neg, a[:, :-2]], axis=1), -np.inf)
        nxt = np.logaddexp(np.logaddexp(a, prev1), prev2) + emit[:, t]
        a = np.where((t < lengths)[:, None], nxt, a)
        alpha[:, t] = a

    rows = np.arange(n)
    last = lengths - 1
    a_end = alpha[rows, last]
    loglik = np.logaddexp(a_end[rows, s_len - 1], a_end[rows, s_len - 2])

    # skip into s+2 from s is allowed iff skip[s+2]
    skip_from = np.concatenate([skip[:, 2:], np.zeros((n, 2), dtype=bool)], axis=1)
    beta = np.full((n, t_max, s_max), -np.inf)
    b = np.full((n, s_max), -np.inf)
    for t in range(t_max - 1, -1, -1):
        nxt1 = np.concatenate([b[:, 1:], neg], axis=1)
        nxt2 = np.where(skip_from, np.concatenate([b[:, 2:], neg, neg], axis=1), -np.inf)
        rec = np.logaddexp(np.logaddexp(b, nxt1), nxt2) + emit[:, t]
        init = np.full((n, s_max), -np.inf)
        init[rows, s_len - 1] = emit[rows, t, s_len - 1]
        init[rows, s_len - 2] = emit[rows, t, s_len - 2]
        b = np.where((t == last)[:, None], init, np.where((t < last)[:, None], rec, -np.inf))
        beta[:, t] = b
    return alpha, beta, loglik, ext


def ctc_loss_batch(probs, targets: Sequence[Sequence[int]], lengths: Sequence[int] | None = None) -> Tensor:
    """Per-sample negative log-likelihoods, shape (N,), for a padded (N, T, V) batch.

    Frames at or beyond ``lengths[i]`` are ignored and get zero gradient.
    """
    probs = as_tensor(probs)
    if probs.ndim != 3:
        raise DimensionError(f"ctc_loss_batch expects (N, T, V), got {probs.shape}")
    n, t_max, v = probs.shape
    if len(targets) != n:
        raise DimensionError(f"{len(targets)} targets for a batch of {n}")
    lengths = np.full(n, t_max) if lengths is None else np.asarray(lengths, dtype=np.int64)
    for tgt, length in zip(targets, lengths):
        if length > t_max or length < 1:
            raise DimensionError(f"sequence length {length} outside 1..{t_max}")
        if any(not 0 < int(c) < v for c in tgt):
            raise VocabularyError(f"target {list(tgt)} has labels outside 1..{v - 1}")
        check_feasible(int(length), tgt)
    y = probs.data.astype(np.float64)
    log_y = np.log(np.maximum(y, _LOG_FLOOR))
    alpha, beta, loglik, ext = ctc_forward_backward(log_y, targets, lengths)
    dtype = probs.dtype

    def backward(g):
        # gamma_t(k) = sum_{s: l'_s = k} alpha_t(s) beta_t(s) / (p * y_tk), the path occupancy
        log_ab = alpha + beta - loglik[:, None, None]
        occ = np.zeros((n, t_max, v))
        labels = np.broadcast_to(ext[:, None, :], log_ab.shape)
        finite = np.isfinite(log_ab)
        idx = np.nonzero(finite)
        np.add.at(occ, (idx[0], idx[1], labels[idx]), np.exp(log_ab[idx] - log_y[idx[0], idx[1], labels[idx]]))
        grad = -occ / np.maximum(y, _LOG_FLOOR)
        return ((np.asarray(g, dtype=np.float64)[:, None, None] * grad).astype(dtype),)

    return make_node((-loglik).astype(dtype), (probs,), backward, "ctc")


def ctc_loss(probs, target: str | Sequence[int], vocab: Vocabulary | None = None) -> Tensor:
    """-ln p(target | probs) for a single (T, V) frame distribution sequence."""
    from .tensor import getitem, reshape

    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise DimensionError(f"ctc_loss expects (T, V), got {probs.shape}")
    labels = vocab.encode(target) if isinstance(target, str) else list(target)
    if vocab is not None and probs.shape[1] != vocab.size:
        raise DimensionError(f"probability width {probs.shape[1]} != vocabulary size {vocab.size}")
    batch = reshape(probs, (1,) + probs.shape)
    return getitem(ctc_loss_batch(batch, [labels]), 0)


# ------------------------------------------------------------- brute force

_MAX_PATHS = 10_000_000


@lru_cache(maxsize=32)
def _path_table(t: int, v: int) -> tuple[np.ndarray, np.ndarray]:
    """Every length-t path over v symbols plus an integer key of its collapse."""
    paths = np.array(list(itertools.product(range(v), repeat=t)), dtype=np.int64).reshape(-1, t)
    prev = np.concatenate([np.full((len(paths), 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != BLANK) & (paths != prev)
    pos = np.cumsum(keep, axis=1) - 1
    keys = np.zeros(len(paths), dtype=np.int64)
    weight = np.power(v, np.maximum(pos, 0))
    keys += np.sum(np.where(keep, paths * weight, 0), axis=1)
    return paths, keys


def _key(target: Sequence[int], v: int) -> int:
    return sum(int(c) * v ** i for i, c in enumerate(target))


def ctc_bruteforce(probs, target: str | Sequence[int], vocab: Vocabulary | None = None) -> float:
    """-ln of the summed probability of every path that collapses to ``target``.

    Returns ``inf`` when no path does.
    """
    y = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    t, v = y.shape
    if v ** t > _MAX_PATHS:
        raise ValueError(f"{v}^{t} paths is too many to enumerate")
    labels = vocab.encode(target) if isinstance(target, str) else list(target)
    paths, keys = _path_table(t, v)
    match = keys == _key(labels, v)
    if not match.any():
        return float("inf")
    chosen = paths[match]
    p = np.prod(y[np.arange(t)[None, :], chosen], axis=1).sum()
    return float(-np.log(p)) if p > 0 else float("inf")


def transcript_marginals(probs) -> dict[tuple[int, ...], float]:
    """Exact probability of every transcript, by enumeration (tiny instances only)."""
    y = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    t, v = y.shape
    if v ** t > _MAX_PATHS:
        raise ValueError(f"{v}^{t} paths is too many to enumerate")
    paths, _ = _path_table(t, v)
    pp = np.prod(y[np.arange(t)[None, :], paths], axis=1)
    out: dict[tuple[int, ...], float] = {}
    for path, p in zip(paths, pp):
        key = tuple(collapse_indices(path))
        out[key] = out.get(key, 0.0) + float(p)
    return out


# ---------------------------------------------------------------- decoding

def greedy_decode(probs, vocab: Vocabulary) -> str:
    """Per-frame argmax (ties to the lowest index), then collapse."""
    y = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    return vocab.decode(collapse_indices(np.argmax(y, axis=-1)))


def prefix_beam_search(probs, beam_width: int = 10) -> list[tuple[tuple[int, ...], float]]:
    """CTC prefix beam search without a language model.

    Each prefix carries the log probability of paths ending in blank and in
    its last symbol. Returns the final beam as (prefix, log p) pairs, best
    first; ties are broken towards the lexicographically smaller prefix.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    y = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    log_y = np.log(np.maximum(y, _LOG_FLOOR))
    neg_inf = -np.inf
    lae = np.logaddexp
    beam: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, neg_inf)}
    for row in log_y:
        nxt: dict[tuple[int, ...], list[float]] = {}

        def bump(prefix, pb, pnb):
            cur = nxt.get(prefix)
            if cur is None:
                nxt[prefix] = [pb, pnb]
            else:
                cur[0] = lae(cur[0], pb)
                cur[1] = lae(cur[1], pnb)

        for prefix, (pb, pnb) in beam.items():
            total = lae(pb, pnb)
            bump(prefix, total + row[BLANK], neg_inf)
            last = prefix[-1] if prefix else None
            for c in range(1, len(row)):
                lp = row[c]
                if lp == neg_inf:
                    continue
                if c == last:
                    # repeat without a blank stays on the same prefix
                    bump(prefix, neg_inf, pnb + lp)
                    bump(prefix + (c,), neg_inf, pb + lp)
                else:
                    bump(prefix + (c,), neg_inf, total + lp)
        # prefixes no path can reach (a repeat with no blank yet) carry -inf and are dropped
        ranked = sorted(((k, v) for k, v in nxt.items() if lae(v[0], v[1]) > neg_inf),
                        key=lambda kv: (-lae(kv[1][0], kv[1][1]), kv[0]))
        beam = {k: (v[0], v[1]) for k, v in ranked[:beam_width]}
    scored = [(k, float(lae(pb, pnb))) for k, (pb, pnb) in beam.items()]
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored


def prefix_beam_decode(probs, vocab: Vocabulary, beam_width: int = 10,
                       topk: int = 1) -> tuple[str, list[tuple[str, float]]]:
    """Best transcript and the top-``topk`` (transcript, log probability) list."""
    beam = prefix_beam_search(probs, beam_width)
    hyps = [(vocab.decode(p), lp) for p, lp in beam[:max(topk, 1)]]
    return hyps[0][0], hyps
