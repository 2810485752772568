"""Edit-distance error rates and corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

BLEU_EPS = 1e-9


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _check_ref(ref: Sequence) -> None:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")


def cer(pred: str, ref: str) -> float:
    _check_ref(ref)
    return levenshtein(pred, ref) / len(ref)


def wer(pred: str, ref: str) -> float:
    r = ref.split()
    _check_ref(r)
    return levenshtein(pred.split(), r) / len(r)


def _check_pairs(preds, refs) -> None:
    if len(preds) != len(refs):
        raise ValueError(f"{len(preds)} predictions for {len(refs)} references")
    if not refs:
        raise ValueError("empty corpus")


def corpus_cer(preds: Sequence[str], refs: Sequence[str]) -> float:
    _check_pairs(preds, refs)
    for r in refs:
        _check_ref(r)
    return sum(levenshtein(p, r) for p, r in zip(preds, refs)) / sum(len(r) for r in refs)


def corpus_wer(preds: Sequence[str], refs: Sequence[str]) -> float:
    _check_pairs(preds, refs)
    rs = [r.split() for r in refs]
    for r in rs:
        _check_ref(r)
    return sum(levenshtein(p.split(), r) for p, r in zip(preds, rs)) / sum(len(r) for r in rs)


def word_error_strict(preds: Sequence[str], refs: Sequence[str]) -> float:
    """Fraction of reference words not reproduced exactly at the same position."""
    _check_pairs(preds, refs)
    wrong = total = 0
    for p, r in zip(preds, refs):
        pw, rw = p.split(), r.split()
        total += len(rw)
        wrong += sum(1 for i, w in enumerate(rw) if i >= len(pw) or pw[i] != w)
    return wrong / total


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(preds: Sequence[str], refs: Sequence[str], max_n: int = 4):
    """Clipped matches and candidate counts per order, plus total lengths."""
    _check_pairs(preds, refs)
    matches = [0] * max_n
    counts = [0] * max_n
    pred_len = ref_len = 0
    for p, r in zip(preds, refs):
        pt, rt = p.split(), r.split()
        _check_ref(rt)
        pred_len += len(pt)
        ref_len += len(rt)
        for n in range(1, max_n + 1):
            cand, ref = ngrams(pt, n), ngrams(rt, n)
            matches[n - 1] += sum(min(c, ref[g]) for g, c in cand.items())
            counts[n - 1] += sum(cand.values())
    return matches, counts, pred_len, ref_len


def bleu(preds: Sequence[str], refs: Sequence[str], max_n: int = 4, eps: float = BLEU_EPS) -> float:
    """Corpus BLEU-4 with brevity penalty.

    An order with no clipped match gets precision (0 + eps) / (count + eps),
    which is 1 when the corpus has no n-grams of that order at all.
    """
    matches, counts, c, r = bleu_stats(preds, refs, max_n)
    log_p = 0.0
    for m, k in zip(matches, counts):
        p = m / k if m > 0 else (m + eps) / (k + eps)
        log_p += math.log(p) / max_n
    if c == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return min(1.0, bp * math.exp(log_p))


@dataclass
class SampleResult:
    id: str
    reference: str
    prediction: str
    cer: float
    wer: float


@dataclass
class EvalReport:
    cer: float
    wer: float
    bleu: float
    n_samples: int
    beam_width: int
    word_error_strict: float
    samples: list[SampleResult] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "cer": self.cer, "wer": self.wer, "bleu": self.bleu, "n_samples": self.n_samples,
            "beam_width": self.beam_width, "word_error_strict": self.word_error_strict,
        }


def evaluate(ids: Sequence[str], preds: Sequence[str], refs: Sequence[str], beam_width: int) -> EvalReport:
    samples = [SampleResult(i, r, p, cer(p, r), wer(p, r)) for i, p, r in zip(ids, preds, refs)]
    return EvalReport(
        corpus_cer(preds, refs), corpus_wer(preds, refs), bleu(preds, refs), len(refs),
        beam_width, word_error_strict(preds, refs), samples,
    )
