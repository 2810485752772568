import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcanet import tensor as tn
from lcanet.tensor import DimensionError, NumericError, Tape, Tensor


def grad_of(f, *leaves):
    for x in leaves:
        x.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    return [x.grad for x in leaves]


# ------------------------------------------------------------------ matmul

# [TRIVIAL]
def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tn.matmul(a, b).data, [[1, 2], [3, 4]])


# [TRIVIAL]
def test_matmul_row_by_column():
    assert tn.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


# [TRIVIAL]
def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --------------------------------------------------------------- pointwise

# [TRIVIAL]
def test_pointwise_values():
    assert tn.pointwise("sigmoid", Tensor(0.0)).data == 0.5
    assert tn.pointwise("tanh", Tensor(0.0)).data == 0.0
    np.testing.assert_array_equal(tn.pointwise("mul", Tensor([1.0, -2.0]), Tensor([3.0, 4.0])).data, [3, -8])
    np.testing.assert_array_equal(tn.pointwise("relu", Tensor([-1.0, 2.0])).data, [0, 2])
    np.testing.assert_array_equal(tn.pointwise("scale", Tensor([1.0, 2.0]), 3.0).data, [3, 6])


# ----------------------------------------------------------------- softmax

# [TRIVIAL]
@pytest.mark.parametrize("x, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0], [0.5, 0.5]),
    ([math.log(1), math.log(2), math.log(3)], [1 / 6, 2 / 6, 3 / 6]),
])
def test_softmax_examples(x, expected):
    np.testing.assert_allclose(tn.softmax(Tensor(x)).data, expected, rtol=0, atol=1e-15)


# [TRIVIAL]
def test_softmax_non_finite_raises():
    with pytest.raises(NumericError):
        tn.softmax(Tensor([0.0, np.inf]))


# [TRIVIAL]
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).uniform(-50, 50, size=(rows, cols))
    y = tn.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


# [TRIVIAL]
def test_masked_softmax_ignores_masked_entries():
    y = tn.softmax(Tensor([[1.0, 2.0, 50.0]]), axis=-1, mask=np.array([[True, True, False]])).data
    np.testing.assert_allclose(y, [[1 / (1 + math.e), math.e / (1 + math.e), 0.0]], atol=1e-15)


# ------------------------------------------------------------------ conv3d

# [PAPER: Table 1 3d-conv1 row]
def test_conv_table1_first_row():
    # 3x75x50x100 -> 32x75x25x50 by the floor formula
    assert tn.conv_output_shape((75, 50, 100), (3, 5, 5), (1, 2, 2), (1, 2, 2)) == (75, 25, 50)


# [TRIVIAL]
def test_conv_delta_kernel_is_identity(rng):
    x = rng.normal(size=(1, 4, 5, 6))
    k = np.zeros((1, 1, 3, 3, 3))
    k[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_allclose(tn.conv3d(x, k, stride=1, pad=1).data, x, atol=0)


# [DERIVED: window sizes counted by hand]
def test_conv_sum_of_ones():
    out = tn.conv3d(np.ones((1, 2, 2, 2)), np.ones((1, 1, 2, 2, 2)), stride=1, pad=0).data
    assert out.shape == (1, 1, 1, 1) and out.item() == 8.0


def _conv_reference(x, k, stride, pad):
    # direct loops over every output voxel
    xp = np.pad(x, ((0, 0), (0, 0), *[(p, p) for p in pad]))
    n, _, t, h, w = xp.shape
    co, _, kt, kh, kw = k.shape
    to, ho, wo = ((t - kt) // stride[0] + 1, (h - kh) // stride[1] + 1, (w - kw) // stride[2] + 1)
    out = np.zeros((n, co, to, ho, wo))
    for a in range(to):
        for b in range(ho):
            for c in range(wo):
                patch = xp[:, :, a * stride[0]:a * stride[0] + kt, b * stride[1]:b * stride[1] + kh,
                           c * stride[2]:c * stride[2] + kw]
                out[:, :, a, b, c] = np.einsum("nijkl,oijkl->no", patch, k)
    return out


# [DERIVED: naive nested-loop convolution]
@pytest.mark.parametrize("im2col", [True, False])
@given(seed=st.integers(0, 2**31 - 1))
def test_conv_matches_direct_loops(im2col, seed):
    from lcanet.tensor import conv as conv_mod
    r = np.random.default_rng(seed)
    stride = tuple(int(s) for s in r.integers(1, 3, size=3))
    pad = tuple(int(p) for p in r.integers(0, 2, size=3))
    x = r.normal(size=(2, 2, 4, 5, 6))
    k = r.normal(size=(3, 2, 2, 3, 3))
    saved = conv_mod._IM2COL_LIMIT
    conv_mod._IM2COL_LIMIT = 10**9 if im2col else 0
    try:
        out = tn.conv3d(x, k, stride=stride, pad=pad).data
    finally:
        conv_mod._IM2COL_LIMIT = saved
    np.testing.assert_allclose(out, _conv_reference(x, k, stride, pad), atol=1e-12)


# [DERIVED: floor((n + 2p - k) / s) + 1]
@given(st.tuples(*[st.integers(1, 12)] * 3), st.tuples(*[st.integers(1, 4)] * 3),
       st.tuples(*[st.integers(1, 3)] * 3), st.tuples(*[st.integers(0, 2)] * 3))
def test_conv_output_shape_floor_formula(dims, kernel, stride, pad):
    if any(k > d + 2 * p for d, k, p in zip(dims, kernel, pad)):
        with pytest.raises(DimensionError):
            tn.conv_output_shape(dims, kernel, stride, pad)
        return
    expected = tuple((d + 2 * p - k) // s + 1 for d, k, s, p in zip(dims, kernel, stride, pad))
    assert tn.conv_output_shape(dims, kernel, stride, pad) == expected
    x = np.zeros((1, *dims))
    assert tn.conv3d(x, np.zeros((1, 1, *kernel)), stride=stride, pad=pad).shape[1:] == expected


# [TRIVIAL]
def test_conv_rejects_bad_stride():
    with pytest.raises(ValueError):
        tn.conv_output_shape((4, 4, 4), 3, 0, 1)


# ----------------------------------------------------------------- maxpool

# [PAPER: Table 1 pool1 row]
def test_maxpool_table1_row():
    assert tn.pool_output_shape((75, 25, 50), (1, 2, 2), (1, 2, 2)) == (75, 12, 25)


# [TRIVIAL]
def test_maxpool_small():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert tn.maxpool3d(x, (1, 2, 2)).data.item() == 4.0


# [TRIVIAL]
def test_maxpool_ties_go_to_first_element():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    (g,) = grad_of(lambda: tn.sum(tn.maxpool3d(x, (1, 2, 2))), x)
    g = g.reshape(4, 4)
    assert g.sum() == 4.0
    for i in range(0, 4, 2):
        for j in range(0, 4, 2):
            window = g[i:i + 2, j:j + 2]
            assert window[0, 0] == 1.0 and window.sum() == 1.0


# -------------------------------------------------------------- batch norm

# [TRIVIAL]
def test_batchnorm_eval_identity_with_default_stats(rng):
    x = rng.normal(size=(2, 3, 2, 2, 2))
    y = tn.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False).data
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), atol=1e-15)
    np.testing.assert_allclose(y, x, atol=1e-5 * np.abs(x).max())


# [TRIVIAL]
def test_batchnorm_running_stats_update(rng):
    x = rng.normal(loc=2.0, size=(4, 2, 3, 2, 2))
    rm, rv = np.zeros(2), np.ones(2)
    tn.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.9)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3, 4)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3, 4)))


# [DERIVED: batch moments]
def test_batchnorm_training_output_is_standardised(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(4, 2, 3, 2, 2))
    y = tn.batch_norm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), 1, atol=1e-4)


# ----------------------------------------------------------------- dropout

# [TRIVIAL]
def test_dropout_eval_is_identity(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(tn.dropout(Tensor(x), 0.5, rng, training=False).data, x)


# [DERIVED: inverted-dropout expectation]
def test_dropout_preserves_expectation():
    r = np.random.default_rng(0)
    x = Tensor(np.full((10_000,), 3.0))
    y = tn.dropout(x, 0.5, r, training=True).data
    assert abs(y.mean() - 3.0) / 3.0 < 0.02


# ---------------------------------------------------------------- backward

# [TRIVIAL]
def test_backward_leaf():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        pass
    tape.backward(x)
    assert x.grad == 1.0


# [DERIVED: d/dx sum x^2 = 2x]
def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = grad_of(lambda: tn.sum(tn.mul(x, x)), x)
    np.testing.assert_array_equal(g, [2.0, 4.0])


# [DERIVED: s(1 - s)]
def test_backward_sigmoid_slope():
    w = Tensor(0.0, requires_grad=True)
    (g,) = grad_of(lambda: tn.sigmoid(tn.mul(w, 1.0)), w)
    assert g == 0.25


# [TRIVIAL]
def test_backward_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = tn.mul(x, 2.0)
    with pytest.raises(DimensionError):
        tape.backward(y)


# [DERIVED: linearity of the adjoint]
@given(st.integers(0, 2**31 - 1))
def test_backward_is_linear(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(r.normal(size=(4, 2)), requires_grad=True)
    f = lambda: tn.sum(tn.tanh(tn.matmul(x, w)))  # noqa: E731
    g = lambda: tn.sum(tn.square(tn.sigmoid(x)))  # noqa: E731
    fx, fw = grad_of(f, x, w)
    (gx,) = grad_of(g, x)
    sx, sw = grad_of(lambda: tn.add(f(), g()), x, w)
    np.testing.assert_allclose(sx, fx + gx, atol=1e-12)
    np.testing.assert_allclose(sw, fw, atol=1e-12)


# --------------------------------------------------------------- gradcheck

# [DERIVED: central difference is exact on quadratics]
def test_gradcheck_quadratic_is_exact(rng):
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    assert tn.gradcheck(lambda: tn.sum(tn.square(x)), [x]) < 1e-9


OPS = {
    "matmul": lambda a, b: tn.matmul(a, b),
    "sigmoid": lambda a, b: tn.sigmoid(tn.matmul(a, b)),
    "tanh": lambda a, b: tn.tanh(tn.matmul(a, b)),
    "softmax": lambda a, b: tn.softmax(tn.matmul(a, b), axis=-1),
    "log_softmax": lambda a, b: tn.log_softmax(tn.matmul(a, b), axis=-1),
    "div": lambda a, b: tn.div(a, tn.add(tn.square(a), 1.0)),
    "exp": lambda a, b: tn.exp(a),
    "concat": lambda a, b: tn.concat([a, tn.transpose(b)], axis=-1),
    "stack": lambda a, b: tn.stack([a, a], axis=1),
    "getitem": lambda a, b: tn.getitem(a, (slice(None), slice(1, 3))),
    "mean": lambda a, b: tn.mean(a, axis=0),
}


# [DERIVED: finite differences]
@pytest.mark.parametrize("name", sorted(OPS))
def test_ops_pass_gradcheck(name, rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    out = OPS[name](a, b)
    proj = Tensor(rng.normal(size=out.shape))
    assert tn.gradcheck(lambda: tn.sum(tn.mul(OPS[name](a, b), proj)), [a, b]) <= 1e-6


# [DERIVED: fault injection]
def test_gradcheck_catches_corrupted_rule(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    tn.inject_fault("matmul")
    try:
        err = tn.gradcheck(lambda: tn.sum(tn.tanh(tn.matmul(x, w))), [x, w])
    finally:
        tn.clear_faults()
    assert err > 1e-2
