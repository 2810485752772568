import dataclasses

import numpy as np
import pytest

from lcanet.checks import tiny_model_config
from lcanet.config import VARIANTS, ConfigError, GrammarConfig, RenderConfig, table1_config, toy_config
from lcanet.ctc import prefix_beam_search
from lcanet.data import make_sample, pad_batch
from lcanet.models import (
    build_model,
    decode_batch,
    frame_distributions,
    model_decode,
    model_loss,
    model_loss_parts,
)
from lcanet.training import AdamState, adam_step, loss_and_grads


# [DERIVED: closed-form count over Table 1 shapes]
def test_table1_parameter_count_closed_form():
    # sum over the Table 1 layer shapes
    v, hid, d_att, d_emb = 28, 256, 256, 32
    conv = 32 * 3 * 75 + 64 * 32 * 75 + 96 * 64 * 75
    bn = 2 * (32 + 64 + 96)
    feat = 96 * 3 * 6
    highway = 2 * (2 * feat * feat + 2 * feat)

    def gru(d_in, h, ctx=0):
        return 3 * d_in * h + 3 * h * h + 2 * h + 3 * ctx * h

    bigru = 2 * gru(feat, hid) + 2 * gru(2 * hid, hid)
    enc_out = 2 * hid
    attention = d_att + hid * d_att + enc_out * d_att
    decoder = gru(d_emb, hid, enc_out) + d_emb * v + hid * v + enc_out * v + v * d_emb
    expected = conv + bn + highway + bigru + attention + decoder
    assert build_model(table1_config("ah-ctc"), seed=0, dtype=np.float32).parameter_count() == expected


# [PAPER: Table 2 check-marks]
@pytest.mark.parametrize("variant,highway,attention,head", [
    ("ah-ctc", True, True, False),
    ("a-ctc", False, True, False),
    ("h-ctc", True, False, True),
    ("ah-ctc-ce", True, True, True),
])
def test_variant_structure(variant, highway, attention, head):
    m = build_model(toy_config(variant), seed=0)
    names = m.named_parameters()
    assert m.has_highway == highway == any(".highway" in k for k in names)
    assert m.has_attention == attention == any(k.startswith("decoder.attention") for k in names)
    assert (m.ctc_head is not None) == head


# [TRIVIAL]
@pytest.mark.parametrize("variant", VARIANTS)
def test_same_seed_same_parameters(variant):
    a = build_model(toy_config(variant), seed=7).named_parameters()
    b = build_model(toy_config(variant), seed=7).named_parameters()
    c = build_model(toy_config(variant), seed=8).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a if a[k].size > 1)


# [TRIVIAL]
def test_initialisation_ranges():
    m = build_model(toy_config("ah-ctc"), seed=0)
    p = m.named_parameters()
    assert np.all(p["encoder.gru0.fwd.b_z"].data == 0.0)
    w = p["encoder.highway0.W_T"].data
    bound = np.sqrt(6.0 / (2 * w.shape[0]))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound


# [TRIVIAL]
def test_invalid_variant_and_lambda():
    with pytest.raises(ConfigError):
        toy_config("ctc-only")
    with pytest.raises(ConfigError):
        toy_config("ah-ctc-ce", ce_lambda=1.5)


def small_batch(rng, n=10):
    # tiny random clips with short transcripts
    frames = rng.normal(size=(n, 1, 8, 4, 8))
    lengths = rng.integers(5, 9, size=n)
    texts = ["".join(rng.choice(list("abc "), size=int(rng.integers(1, 3)))).strip() or "a" for _ in range(n)]
    return frames, lengths, texts


# [TRIVIAL]
def test_lambda_one_is_ctc_branch(rng):
    m = build_model(dataclasses.replace(tiny_model_config("ah-ctc-ce"), ce_lambda=1.0), seed=3)
    frames, lengths, texts = small_batch(rng)
    parts = model_loss_parts(m, frames, texts, lengths, mode="eval")
    assert parts["total"].data == parts["ctc"].data


# [TRIVIAL]
def test_lambda_zero_is_ce_branch(rng):
    m = build_model(dataclasses.replace(tiny_model_config("ah-ctc-ce"), ce_lambda=0.0), seed=3)
    frames, lengths, texts = small_batch(rng)
    parts = model_loss_parts(m, frames, texts, lengths, mode="eval")
    assert parts["total"].data == parts["ce"].data


# [TRIVIAL]
@pytest.mark.parametrize("variant", VARIANTS)
def test_distribution_rows_sum_to_one(variant, rng):
    m = build_model(tiny_model_config(variant), seed=1)
    frames, lengths, _ = small_batch(rng, 3)
    p = frame_distributions(m, frames, lengths).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


# [TRIVIAL]
@pytest.mark.parametrize("variant", VARIANTS)
def test_untrained_decode_smoke(variant, rng):
    m = build_model(tiny_model_config(variant), seed=1)
    out = model_decode(m, rng.normal(size=(1, 6, 4, 8)), beam_width=3)
    assert isinstance(out, str)


# [TRIVIAL]
def test_one_hot_path_decodes_to_collapse(rng):
    m = build_model(tiny_model_config("h-ctc"), seed=0)
    m.ctc_head.W.data[:] = 0.0
    m.ctc_head.b.data[:] = -50.0
    m.ctc_head.b.data[m.vocab.encode("q")[0]] = 50.0
    assert model_decode(m, rng.normal(size=(1, 6, 4, 8)), beam_width=4) == "q"


# [TRIVIAL]
def test_lambda_one_joint_decode_is_ctc_beam(rng):
    m = build_model(dataclasses.replace(tiny_model_config("ah-ctc-ce"), ce_lambda=1.0), seed=2)
    frames = rng.normal(size=(1, 1, 7, 4, 8))
    probs = frame_distributions(m, frames).data[0]
    best, logp = prefix_beam_search(probs, 5)[0]
    got = decode_batch(m, frames, beam_width=5)[0][0]
    assert got == (m.vocab.decode(best), logp)


# [DERIVED: scores recomputed per hypothesis]
def test_joint_rescoring_mixes_scores(rng):
    from lcanet.models import attention_log_likelihood, encode

    m = build_model(dataclasses.replace(tiny_model_config("ah-ctc-ce"), ce_lambda=0.3), seed=2)
    frames = rng.normal(size=(1, 1, 7, 4, 8))
    probs = frame_distributions(m, frames).data[0]
    h = encode(m, frames)
    expected = []
    for prefix, lp in prefix_beam_search(probs, 5):
        att = float(attention_log_likelihood(m, h, [list(prefix)], [7]).data[0]) if prefix else 0.0
        expected.append((0.3 * lp + 0.7 * att, m.vocab.decode(prefix)))
    top = max(expected, key=lambda e: e[0])
    text, score = decode_batch(m, frames, beam_width=5)[0][0]
    assert text == top[1] and np.isclose(score, top[0], rtol=0, atol=1e-12)


# [DERIVED: training smoke run]
@pytest.mark.parametrize("variant", VARIANTS)
def test_overfit_four_samples(variant):
    # 50 optimiser steps on a fixed batch lower the loss
    rng = np.random.default_rng(0)
    samples = [make_sample(i, 11, GrammarConfig(), RenderConfig()) for i in range(4)]
    frames, lengths, texts = pad_batch(samples)
    texts = [t.split()[0] for t in texts]
    m = build_model(dataclasses.replace(toy_config(variant), encoder=dataclasses.replace(
        toy_config().encoder, dropout=0.0, highway_layers=1, gru_layers=1, gru_hidden=16)), seed=0)
    params = m.named_parameters()
    state = AdamState(lr=3e-3)
    before = float(model_loss(m, frames, texts, lengths, mode="train").data)
    for _ in range(50):
        _, grads = loss_and_grads(m, frames, lengths, texts, rng)
        adam_step(params, grads, state)
    after = float(model_loss(m, frames, texts, lengths, mode="train").data)
    assert after < before
