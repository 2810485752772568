import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcanet import tensor as tn
from lcanet.config import EncoderConfig, table1_config, toy_config
from lcanet.layers import (
    ContextError,
    GruParams,
    HighwayParams,
    bigru_forward,
    conv_block_forward,
    embed,
    encoder_forward,
    gru_sequence,
    gru_step,
    highway_forward,
)
from lcanet.models import _Init, build_model
from lcanet.tensor import DimensionError, Tensor


def zeros_highway(d=2, b_t=0.0):
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
    return HighwayParams(z(d, d), Tensor(np.full(d, b_t), requires_grad=True), z(d, d), z(d))


def zeros_gru(d_in, hidden, ctx=None, b_z=0.0):
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
    p = GruParams(z(d_in, hidden), z(hidden, hidden), Tensor(np.full(hidden, b_z)), z(d_in, hidden),
                  z(hidden, hidden), z(hidden), z(d_in, hidden), z(hidden, hidden))
    if ctx is not None:
        p.C_z, p.C_r, p.C_p = z(ctx, hidden), z(ctx, hidden), z(ctx, hidden)
    return p


def random_gru(rng, d_in, hidden, ctx=None):
    p = _Init(int(rng.integers(1 << 30)), np.float64).gru(d_in, hidden, ctx)
    p.b_z.data = rng.normal(size=hidden)
    p.b_r.data = rng.normal(size=hidden)
    return p


# ----------------------------------------------------------------- highway

# [DERIVED: sigmoid(0) = 0.5 by hand]
def test_highway_zero_params():
    g = highway_forward(Tensor([1.0, -1.0]), zeros_highway()).data
    np.testing.assert_allclose(g, [0.75, -0.25], atol=1e-15)


# [TRIVIAL]
def test_highway_gate_closed_carries_input():
    x = np.array([0.3, -2.0])
    np.testing.assert_allclose(highway_forward(Tensor(x), zeros_highway(b_t=-100.0)).data, x, atol=1e-6)


# [TRIVIAL]
def test_highway_gate_open_transforms(rng):
    p = zeros_highway(b_t=100.0)
    p.W_H.data = rng.normal(size=(2, 2))
    p.b_H.data = rng.normal(size=2)
    x = np.array([0.3, -2.0])
    expected = 1 / (1 + np.exp(-(x @ p.W_H.data + p.b_H.data)))
    np.testing.assert_allclose(highway_forward(Tensor(x), p).data, expected, atol=1e-6)


# [TRIVIAL]
def test_highway_width_mismatch():
    with pytest.raises(DimensionError):
        highway_forward(Tensor(np.ones(3)), zeros_highway(2))


# --------------------------------------------------------------------- GRU

# [DERIVED: z = r = 0.5, candidate 0]
def test_gru_zero_params_halves_state():
    v = np.array([0.4, -1.2, 2.0])
    np.testing.assert_allclose(gru_step(Tensor(np.ones(2)), Tensor(v), None, zeros_gru(2, 3)).data, 0.5 * v)


# [TRIVIAL]
def test_gru_closed_update_gate_keeps_memory(rng):
    p = zeros_gru(2, 3, b_z=-100.0)
    p.W_h.data = rng.normal(size=(2, 3))
    v = rng.normal(size=3)
    np.testing.assert_allclose(gru_step(Tensor(rng.normal(size=2)), Tensor(v), None, p).data, v, atol=1e-12)


# [TRIVIAL]
def test_gru_open_update_gate_with_zero_candidate_resets(rng):
    p = zeros_gru(2, 3, b_z=100.0)
    p.b_r.data = rng.normal(size=3)
    h = gru_step(Tensor(rng.normal(size=2)), Tensor(rng.normal(size=3)), None, p).data
    np.testing.assert_allclose(h, 0.0, atol=1e-12)


# [TRIVIAL]
def test_gru_context_mismatch():
    with pytest.raises(ContextError):
        gru_step(Tensor(np.ones(2)), Tensor(np.ones(3)), Tensor(np.ones(4)), zeros_gru(2, 3))
    with pytest.raises(ContextError):
        gru_step(Tensor(np.ones(2)), Tensor(np.ones(3)), None, zeros_gru(2, 3, ctx=4))


# [DERIVED: convex combination]
@given(st.integers(0, 2**31 - 1))
def test_gru_state_between_previous_and_candidate(seed):
    r = np.random.default_rng(seed)
    p = random_gru(r, 3, 4)
    g, h = r.normal(size=3), r.normal(size=4)
    out = gru_step(Tensor(g), Tensor(h), None, p).data
    rr = 1 / (1 + np.exp(-(g @ p.W_r.data + h @ p.U_r.data + p.b_r.data)))
    cand = np.tanh(g @ p.W_h.data + (rr * h) @ p.U_h.data)
    lo, hi = np.minimum(h, cand), np.maximum(h, cand)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


# [DERIVED: composite per-step GRU]
def test_fused_sequence_matches_steps(rng):
    p = random_gru(rng, 3, 4)
    x = rng.normal(size=(2, 6, 3))
    lengths = np.array([6, 4])
    fused = gru_sequence(Tensor(x), p, lengths=lengths).data
    for i, n in enumerate(lengths):
        h = Tensor(np.zeros(4))
        for t in range(n):
            h = gru_step(Tensor(x[i, t]), h, None, p)
            np.testing.assert_allclose(fused[i, t], h.data, atol=1e-13)
        # state is carried past the end of the sample
        np.testing.assert_allclose(fused[i, n:], np.broadcast_to(h.data, fused[i, n:].shape), atol=1e-13)


# [DERIVED: finite differences]
def test_gru_sequence_gradcheck(rng):
    p = random_gru(rng, 3, 4)
    x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    h0 = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    proj = Tensor(rng.normal(size=(2, 5, 4)))
    params = [x, h0, p.W_z, p.U_z, p.b_z, p.W_r, p.U_r, p.b_r, p.W_h, p.U_h]
    err = tn.gradcheck(lambda: tn.sum(tn.mul(gru_sequence(x, p, h0, [5, 3]), proj)), params, n_coords=150)
    assert err <= 1e-6


# ------------------------------------------------------------------ Bi-GRU

# [TRIVIAL]
def test_bigru_single_frame(rng):
    pf, pb = random_gru(rng, 3, 2), random_gru(rng, 3, 2)
    x = rng.normal(size=(1, 3))
    out = bigru_forward(Tensor(x), pf, pb).data
    h0 = Tensor(np.zeros(2))
    expected = np.concatenate([gru_step(Tensor(x[0]), h0, None, pf).data, gru_step(Tensor(x[0]), h0, None, pb).data])
    np.testing.assert_allclose(out[0], expected, atol=1e-13)


# [DERIVED: reversal construction]
def test_bigru_backward_half_is_reversed_forward_run(rng):
    pf, pb = random_gru(rng, 3, 2), random_gru(rng, 3, 2)
    x = rng.normal(size=(5, 3))
    out = bigru_forward(Tensor(x), pf, pb).data
    rev = gru_sequence(Tensor(x[::-1][None]), pb).data[0][::-1]
    np.testing.assert_allclose(out[:, 2:], rev, atol=1e-13)
    np.testing.assert_allclose(out[:, :2], gru_sequence(Tensor(x[None]), pf).data[0], atol=1e-13)


# [TRIVIAL]
def test_bigru_zero_params_zero_output():
    out = bigru_forward(Tensor(np.ones((4, 3))), zeros_gru(3, 2), zeros_gru(3, 2)).data
    np.testing.assert_array_equal(out, 0.0)


# [DERIVED: unpadded runs]
def test_bigru_padded_batch_matches_individual_runs(rng):
    pf, pb = random_gru(rng, 3, 2), random_gru(rng, 3, 2)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 3))
    batch = np.zeros((2, 5, 3))
    batch[0], batch[1, :3] = a, b
    out = bigru_forward(Tensor(batch), pf, pb, lengths=[5, 3]).data
    np.testing.assert_allclose(out[0], bigru_forward(Tensor(a), pf, pb).data, atol=1e-13)
    np.testing.assert_allclose(out[1, :3], bigru_forward(Tensor(b), pf, pb).data, atol=1e-13)


# [TRIVIAL]
def test_bigru_empty_sequence():
    with pytest.raises(DimensionError):
        bigru_forward(Tensor(np.zeros((0, 3))), zeros_gru(3, 2), zeros_gru(3, 2))


# -------------------------------------------------------------- conv block

def toy_block(rng, dropout=0.0):
    cfg = toy_config("h-ctc")
    model = build_model(cfg, seed=int(rng.integers(1 << 30)))
    return cfg.encoder.conv_blocks[0], model.encoder.conv[0]


# [DERIVED: batch stats copied into eval]
def test_conv_block_dropout_zero_train_equals_eval_given_stats(rng):
    spec, p = toy_block(rng)
    x = rng.normal(size=(2, 1, 5, 8, 16))
    train = conv_block_forward(x, spec, p, "train", rng, dropout=0.0).data
    # eval with the batch statistics copied in reproduces train mode
    y = tn.conv3d(x, p.kernel, stride=spec.stride, pad=spec.pad).data
    p.bn.running_mean[:] = y.mean(axis=(0, 2, 3, 4))
    p.bn.running_var[:] = y.var(axis=(0, 2, 3, 4))
    evalm = conv_block_forward(x, spec, p, "eval", None, dropout=0.0).data
    np.testing.assert_allclose(train, evalm, atol=1e-12)


# [DERIVED: conv, scale, relu, pool by hand]
def test_conv_block_eval_with_default_stats(rng):
    spec, p = toy_block(rng)
    x = rng.normal(size=(1, 1, 4, 8, 16))
    out = conv_block_forward(x, spec, p, "eval").data
    y = np.maximum(tn.conv3d(x, p.kernel, stride=spec.stride, pad=spec.pad).data / np.sqrt(1 + 1e-5), 0)
    np.testing.assert_allclose(out, tn.maxpool3d(y, spec.pool, spec.pool_stride).data, atol=1e-12)


# [PAPER: Table 1 pool rows]
def test_table1_block_chain():
    shapes = table1_config().encoder.block_shapes()
    assert [s[1] for s in shapes] == [(32, 75 // 75, 12, 25), (64, 1, 6, 12), (96, 1, 3, 6)]


# ----------------------------------------------------------------- encoder

# [DERIVED: shape formulas]
def test_toy_encoder_output_shape(rng):
    cfg = toy_config("ah-ctc")
    model = build_model(cfg, seed=0)
    out = encoder_forward(rng.normal(size=(1, 20, 8, 16)), cfg.encoder, model.encoder)
    assert out.shape == (20, 64)


# [DERIVED: unpadded runs]
def test_encoder_padded_batch_matches_single(rng):
    cfg = toy_config("h-ctc")
    model = build_model(cfg, seed=0)
    a, b = rng.normal(size=(1, 7, 8, 16)), rng.normal(size=(1, 4, 8, 16))
    batch = np.zeros((2, 1, 7, 8, 16))
    batch[0], batch[1, :, :4] = a, b
    out = encoder_forward(batch, cfg.encoder, model.encoder, lengths=[7, 4]).data
    np.testing.assert_allclose(out[0], encoder_forward(a, cfg.encoder, model.encoder).data, atol=1e-12)
    np.testing.assert_allclose(out[1, :4], encoder_forward(b, cfg.encoder, model.encoder).data, atol=1e-12)


# [TRIVIAL]
def test_encoder_highway_width_mismatch(rng):
    cfg = toy_config("ah-ctc")
    model = build_model(cfg, seed=0)
    wrong = EncoderConfig(frame_height=16, frame_width=16)
    with pytest.raises(DimensionError):
        encoder_forward(rng.normal(size=(1, 4, 16, 16)), wrong, model.encoder)


# --------------------------------------------------------------- embedding

# [TRIVIAL]
def test_embed_examples(rng):
    E = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(embed(Tensor(np.eye(5)[2]), Tensor(E)).data, E[2])
    np.testing.assert_allclose(embed(Tensor(np.full(5, 0.2)), Tensor(E)).data, E.mean(axis=0), atol=1e-15)
    np.testing.assert_array_equal(embed(Tensor(np.zeros(5)), Tensor(E)).data, 0.0)


# [TRIVIAL]
def test_embed_width_mismatch():
    with pytest.raises(DimensionError):
        embed(Tensor(np.ones(4)), Tensor(np.ones((5, 3))))
