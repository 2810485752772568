import math
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcanet.metrics import (
    BLEU_EPS,
    bleu,
    bleu_stats,
    cer,
    corpus_cer,
    corpus_wer,
    evaluate,
    levenshtein,
    wer,
    word_error_strict,
)

REF = "set blue with h seven again"
PRED = "set blue at h seven again"

text = st.text(alphabet="abc ", max_size=8)


def counting_oracle(preds, refs, max_n=4, eps=BLEU_EPS):
    """BLEU written out from enumerated n-gram lists."""
    logs = 0.0
    c = sum(len(p.split()) for p in preds)
    r = sum(len(x.split()) for x in refs)
    for n in range(1, max_n + 1):
        m = k = 0
        for p, ref in zip(preds, refs):
            pw, rw = p.split(), ref.split()
            cand = [tuple(pw[i:i + n]) for i in range(len(pw) - n + 1)]
            avail = Counter(tuple(rw[i:i + n]) for i in range(len(rw) - n + 1))
            for g in cand:
                k += 1
                if avail[g] > 0:
                    avail[g] -= 1
                    m += 1
        logs += math.log(m / k if m else (m + eps) / (k + eps)) / max_n
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return min(1.0, bp * math.exp(logs))


# ------------------------------------------------------------- levenshtein

# [DERIVED: DP tables by hand]
@pytest.mark.parametrize("a,b,d", [("", "", 0), ("abc", "", 3), ("", "ab", 2), ("kitten", "sitting", 3),
                                   ("flaw", "lawn", 2)])
def test_levenshtein_examples(a, b, d):
    assert levenshtein(a, b) == d


# [DERIVED: metric axioms]
@given(text, text, text)
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert (levenshtein(a, b) == 0) == (a == b)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


# [TRIVIAL]
@given(text, text)
def test_levenshtein_bounds(a, b):
    assert abs(len(a) - len(b)) <= levenshtein(a, b) <= max(len(a), len(b))


# ----------------------------------------------------------------- cer/wer

# [DERIVED: one substitution over six words]
def test_error_rate_examples():
    assert cer(REF, REF) == 0.0 and wer(REF, REF) == 0.0
    assert wer(PRED, REF) == 1 / 6
    assert cer("aaaa", "a") == 3.0
    assert cer(PRED, REF) == levenshtein(PRED, REF) / len(REF)


# [TRIVIAL]
def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        cer("a", "")
    with pytest.raises(ValueError):
        wer("a", "   ")


# [DERIVED: distances summed by hand]
def test_corpus_rates_pool_distances():
    preds, refs = ["ab", "xyz"], ["ab", "xyzw"]
    assert corpus_cer(preds, refs) == 1 / 6
    assert corpus_wer(["a b", "c"], ["a b", "d"]) == 1 / 3
    with pytest.raises(ValueError):
        corpus_cer(["a"], ["a", "b"])


# [TRIVIAL]
@given(st.text(alphabet="ab", min_size=1, max_size=6), st.text(alphabet="ab", max_size=6),
       st.text(alphabet="ab", min_size=1, max_size=6))
def test_common_suffix_never_raises_rate(ref, pred, suffix):
    assert cer(pred + suffix, ref + suffix) <= cer(pred, ref)


# [DERIVED: positions compared by hand]
def test_strict_word_rule():
    assert word_error_strict([PRED], [REF]) == 1 / 6
    # an insertion shifts every later position under the strict rule
    assert word_error_strict(["set set blue with h seven again"], [REF]) == 5 / 6
    assert corpus_wer(["set set blue with h seven again"], [REF]) == 1 / 6


# -------------------------------------------------------------------- BLEU

# [TRIVIAL]
def test_bleu_identical_is_one():
    assert bleu([REF, "bin red by a zero now"], [REF, "bin red by a zero now"]) == 1.0


# [DERIVED: n-grams enumerated by hand]
def test_bleu_precisions_one_substitution():
    matches, counts, c, r = bleu_stats([PRED], [REF])
    assert (matches, counts) == ([5, 3, 1, 0], [6, 5, 4, 3])
    assert c == r == 6
    expected = math.exp((math.log(5 / 6) + math.log(3 / 5) + math.log(1 / 4) + math.log(BLEU_EPS / (3 + BLEU_EPS))) / 4)
    assert bleu([PRED], [REF]) == pytest.approx(expected, rel=1e-12)
    assert bleu([PRED], [REF]) == pytest.approx(counting_oracle([PRED], [REF]), rel=1e-12)


# [DERIVED: n-gram counting oracle]
def test_bleu_single_word():
    # no 2..4-grams exist, so those orders contribute eps / eps = 1
    assert bleu(["now"], ["now"]) == counting_oracle(["now"], ["now"]) == 1.0
    assert bleu(["soon"], ["now"]) == pytest.approx(counting_oracle(["soon"], ["now"]), rel=1e-12)


# [DERIVED: exp(1 - r/c)]
def test_bleu_brevity_penalty():
    assert bleu(["set blue"], ["set blue at"]) == pytest.approx(
        math.exp(1 - 3 / 2) * math.exp((0 + 0 + 0 + 0) / 4), rel=1e-12)
    assert bleu([""], ["a"]) == 0.0


# [TRIVIAL]
def test_bleu_length_mismatch():
    with pytest.raises(ValueError):
        bleu(["a"], ["a", "b"])


words = st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=4).map(" ".join)


# [DERIVED: n-gram counting oracle]
@given(st.lists(st.tuples(words, words), min_size=1, max_size=3))
def test_bleu_matches_oracle_and_is_one_iff_equal(pairs):
    preds, refs = [p for p, _ in pairs], [r for _, r in pairs]
    b = bleu(preds, refs)
    assert 0.0 <= b <= 1.0
    assert b == pytest.approx(counting_oracle(preds, refs), rel=1e-9, abs=1e-300)
    assert (b == 1.0) == (preds == refs)


# ----------------------------------------------------------------- reports

# [TRIVIAL]
def test_evaluate_report():
    rep = evaluate(["s0", "s1"], [PRED, REF], [REF, REF], beam_width=10)
    assert rep.n_samples == 2 and rep.beam_width == 10
    assert rep.wer == 1 / 12
    assert rep.samples[0].wer == 1 / 6 and rep.samples[1].cer == 0.0
    assert set(rep.summary()) == {"cer", "wer", "bleu", "n_samples", "beam_width", "word_error_strict"}
