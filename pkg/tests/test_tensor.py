import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from vglab import tensor as T
from vglab.errors import ContractError, NumericError, ShapeError
from vglab.tensor import Tensor, grad_check

finite = st.floats(-20, 20, allow_nan=False, width=64)


def param(shape, seed=0, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(scale=scale, size=shape), requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = T.matmul(np.eye(2), np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_hand_product():
    assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_annihilator():
    out = T.matmul(np.zeros((2, 3)), np.random.default_rng(0).normal(size=(3, 4)))
    assert out.shape == (2, 4) and not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_matmul_grads_match_central_differences():
    a, b = param((3, 4), 1), param((4, 2), 2)
    rep = grad_check(lambda: T.matmul(a, b).sum() * 1.0 + (T.matmul(a, b) * T.matmul(a, b)).sum(), [a, b], eps=1e-4)
    assert rep.max_error < 1e-6


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
    left = T.matmul(T.matmul(a, b), c).data
    right = T.matmul(a, T.matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-9, rtol=0)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(np.zeros(4)).data, [0.25] * 4)


def test_softmax_ln3():
    np.testing.assert_allclose(T.softmax(np.array([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@given(x=hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite), c=finite)
def test_softmax_rows_and_shift_invariance(x, c):
    y = T.softmax(x, axis=-1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax(x + c, axis=-1).data, y, atol=1e-12)


def test_softmax_rows_100_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        y = T.softmax(rng.normal(scale=5, size=(3, rng.integers(1, 9))), axis=-1).data
        assert (y >= 0).all() and np.abs(y.sum(-1) - 1).max() < 1e-9


def test_softmax_masked_entries_vanish():
    y = T.softmax(np.array([1.0, 2.0 + T.MASK_VALUE, 0.5])).data
    assert y[1] == 0.0


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(np.full((2, 5), 3.0), np.ones(5), np.zeros(5))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_two_values():
    out = T.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), eps=1e-14)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)


def test_layer_norm_zero_gain_returns_bias():
    bias = np.array([0.5, -1.0, 2.0])
    out = T.layer_norm(np.random.default_rng(0).normal(size=(4, 3)), np.zeros(3), bias)
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (4, 3)))


def test_layer_norm_width_mismatch():
    with pytest.raises(ShapeError):
        T.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))


# ---------------------------------------------------------------- pointwise

def test_pointwise_fixed_points():
    assert T.sigmoid(0.0).item() == 0.5
    assert T.gelu(0.0).item() == 0.0


def test_gelu_is_exact_erf_form():
    x = np.array([-2.0, -0.5, 1.0, 3.0])
    expected = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(T.gelu(x).data, expected, rtol=1e-15)


def test_sigmoid_extremes_are_finite():
    y = T.sigmoid(np.array([-800.0, 800.0])).data
    assert np.isfinite(y).all()


def test_concat_shape_law():
    out = T.concat([np.ones((3, 2)), np.zeros((3, 5))])
    assert out.shape == (3, 7)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        T.concat([np.ones((3, 2)), np.ones((4, 2))])


def test_add_incompatible_shapes():
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 3)), np.ones((3, 2)))


def test_non_finite_output_is_an_error():
    with pytest.raises(NumericError):
        T.log(np.array([0.0]))


# ---------------------------------------------------------------- backward

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_backward_unused_param_gets_no_gradient():
    x, p = Tensor(2.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    (x * x).backward()
    assert p.grad is None or p.grad == 0.0


def test_backward_accumulates():
    x = Tensor(3.0, requires_grad=True)
    loss = x * x
    loss.backward()
    loss.backward()
    assert x.grad == 12.0


def test_backward_needs_scalar():
    x = param((2, 2))
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_shared_subexpression_gradients():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data**2)


OPS = {
    "add": lambda a, b: (a + b * 2.0).sum(),
    "sub_div": lambda a, b: (a / (T.exp(b) + 1.0) - b).sum(),
    "mul_broadcast": lambda a, b: (a * T.mean(b, axis=0)).sum(),
    "softmax": lambda a, b: (T.softmax(a, axis=-1) * b).sum(),
    "log_softmax": lambda a, b: (T.log_softmax(a, axis=0) * b).sum(),
    "layer_norm": lambda a, b: (T.layer_norm(a, T.mean(b, axis=0), T.mean(b * b, axis=1)) * T.exp(a)).sum(),
    "gelu": lambda a, b: (T.gelu(a) * b).sum(),
    "sigmoid": lambda a, b: (T.sigmoid(a) * b).sum(),
    "concat": lambda a, b: (T.concat([a, b]) * T.concat([b, a])).sum(),
    "transpose_reshape": lambda a, b: (T.transpose(a).reshape(-1) * b.reshape(-1)).sum(),
    "swapaxes_matmul": lambda a, b: T.matmul(T.swapaxes(a, 0, 1), b).sum(),
    "mean_exp": lambda a, b: T.mean(T.exp(a * 0.3) * b, axis=0).sum(),
    "gather": lambda a, b: T.gather_last(a * b, np.array([0, 2, 1])).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check(name):
    a = param((3, 3), 10)
    b = param((3, 3), 11)
    rep = grad_check(lambda: OPS[name](a, b), [a, b])
    assert rep.max_error < 1e-4, rep


def test_embedding_grad_scatter_adds():
    table = param((5, 3))
    ids = np.array([[1, 1, 4]])
    rep = grad_check(lambda: (T.embedding(table, ids) * T.embedding(table, ids)).sum(), [table])
    assert rep.max_error < 1e-6
    table.grad = None
    T.embedding(table, ids).sum().backward()
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 0, 1])


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_quadratic_form():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    a = Tensor(a @ a.T)
    x = param((4, 1), 5)
    rep = grad_check(lambda: T.matmul(T.transpose(x), T.matmul(a, x)).sum(), {"x": x})
    assert rep.max_error < 1e-6
    assert set(rep.per_param) == {"x"}


def test_grad_check_constant_objective():
    x = param((3,))
    rep = grad_check(lambda: Tensor(2.0) + 0.0 * x.sum(), [x])
    assert rep.max_error == 0.0


def test_grad_check_reports_nan():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: T.log(x - 1.0).sum(), [x])


def test_grad_check_detects_wrong_gradient():
    x = param((3,))

    def bad():
        out = T.exp(x)
        out._backward = lambda g: (g * 2.0,)
        return out.sum()

    assert grad_check(bad, [x]).max_error > 0.1


# ---------------------------------------------------------------- serialisation

def test_tensor_roundtrip(tmp_path):
    t = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    T.save_tensor(tmp_path / "t.bin", t)
    back = T.load_tensor(tmp_path / "t.bin")
    assert back.shape == (2, 3, 4)
    np.testing.assert_array_equal(back.data, t.data)


def test_tensor_format_is_little_endian_with_rank_header():
    buf = io.BytesIO()
    T.write_tensor(buf, np.array([[1.0, 2.0]]))
    raw = buf.getvalue()
    assert raw[:4] == (2).to_bytes(4, "little")
    assert raw[4:12] == (1).to_bytes(8, "little") and raw[12:20] == (2).to_bytes(8, "little")
    assert np.frombuffer(raw[20:], "<f8").tolist() == [1.0, 2.0]


def test_no_grad_skips_graph():
    x = param((2,))
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
