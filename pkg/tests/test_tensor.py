import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hivit import tensor as T
from hivit.tensor import Tensor, backward, count_macs, gather_units, no_grad

from conftest import grad_error

finite = st.floats(-50, 50, allow_nan=False, width=64)


# -- matmul -----------------------------------------------------------------
def test_matmul_identity(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_matmul_hand_values():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError) as ei:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(ei.value) and "(4, 5)" in str(ei.value)


def test_matmul_gradient_fd(rng):
    assert grad_error(T.matmul, rng.standard_normal((4, 5)), rng.standard_normal((5, 3))) < 1e-6


def test_matmul_batched_broadcast_gradient(rng):
    a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((5, 2))
    assert grad_error(T.matmul, a, b) < 1e-6


def test_linear_gradient_and_macs(rng):
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 6)), rng.standard_normal(6)
    assert grad_error(T.linear, x, w, b) < 1e-6
    with count_macs() as c:
        T.linear(Tensor(x), Tensor(w), Tensor(b))
    assert c[0] == 2 * 3 * 4 * 6


# -- softmax ----------------------------------------------------------------
def test_softmax_uniform():
    assert np.allclose(T.softmax_lastdim(Tensor(np.zeros(4))).data, 0.25)


def test_softmax_large_logits_no_overflow():
    s = T.softmax_lastdim(Tensor(np.array([1e4, -1e4]))).data
    assert np.all(np.isfinite(s)) and s[0] == pytest.approx(1.0) and s[1] == pytest.approx(0.0)


def test_softmax_gradient_fd(rng):
    assert grad_error(T.softmax_lastdim, rng.standard_normal(7)) < 1e-6


def test_softmax_nonfinite_flag():
    out = T.softmax_lastdim(Tensor(np.array([0.0, np.nan])))
    assert out.name == "nonfinite"
    assert T.softmax_lastdim(Tensor(np.zeros(3))).name != "nonfinite"


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite))
def test_softmax_rows_are_distributions(x):
    s = T.softmax_lastdim(Tensor(x)).data
    assert np.all(s >= 0)
    assert np.allclose(s.sum(-1), 1.0)


@given(arrays(np.float64, 6, elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    assert np.allclose(T.softmax_lastdim(Tensor(x)).data, T.softmax_lastdim(Tensor(x + c)).data, atol=1e-12)


# -- layer norm -------------------------------------------------------------
def _ln(x, g, b):
    return T.layer_norm(x, g, b, 1e-6)


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor(np.full(5, 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, np.zeros(5))


def test_layer_norm_symmetric_pair():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [1.0, -1.0])


def test_layer_norm_gradient_fd(rng):
    assert grad_error(_ln, rng.standard_normal((3, 6)), rng.standard_normal(6), rng.standard_normal(6)) < 1e-6


def test_layer_norm_rejects_bad_affine_and_eps():
    x = Tensor(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 16)), elements=finite))
def test_layer_norm_standardizes_rows(x):
    if np.any(x.std(-1) < 1e-2):
        return
    y = T.layer_norm(Tensor(x), Tensor(np.ones(x.shape[-1])), Tensor(np.zeros(x.shape[-1]))).data
    assert np.allclose(y.mean(-1), 0.0, atol=1e-9)
    assert np.allclose(y.var(-1), 1.0, atol=1e-3)


# -- gelu -------------------------------------------------------------------
def test_gelu_zero_and_asymptote():
    out = T.gelu(Tensor(np.array([0.0, 20.0, -20.0]))).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(20.0)
    assert abs(out[2]) < 1e-12


def test_gelu_constants():
    assert T.GELU_SQRT_2_OVER_PI == pytest.approx(math.sqrt(2.0 / math.pi))
    assert T.GELU_CUBIC == 0.044715


@pytest.mark.parametrize("x", [-2.0, -0.5, 0.5, 2.0])
def test_gelu_gradient_fd(x):
    assert grad_error(T.gelu, np.array([x])) < 1e-5


# -- gather_units -------------------------------------------------------------
def _selection(idx, M):
    S = np.zeros((len(idx), M))
    S[np.arange(len(idx)), idx] = 1.0
    return S


@settings(max_examples=40)
@given(st.integers(2, 9), st.data())
def test_gather_matches_selection_matrix(M, data):
    k = data.draw(st.integers(1, M))
    idx = np.array(data.draw(st.permutations(range(M)))[:k])
    rng = np.random.default_rng(M * 31 + k)
    x = rng.standard_normal((2, M, 3))
    S = _selection(idx, M)
    t = Tensor(x, requires_grad=True)
    out = gather_units(t, idx)
    assert np.array_equal(out.data, np.einsum("km,bmd->bkd", S, x))
    g = rng.standard_normal(out.shape)
    backward((out * Tensor(g)).sum())
    assert np.allclose(t.grad, np.einsum("km,bkd->bmd", S, g))


def test_gather_per_sample_rows(rng):
    x = rng.standard_normal((2, 5, 2))
    idx = np.array([[0, 3], [4, 1]])
    out = gather_units(Tensor(x), idx).data
    assert np.array_equal(out[0], x[0, [0, 3]]) and np.array_equal(out[1], x[1, [4, 1]])
    assert grad_error(lambda t: gather_units(t, idx), x) < 1e-9


@pytest.mark.parametrize("idx", [[5], [-1], [1, 1], [[0, 1]]])
def test_gather_rejects_bad_indices(idx):
    with pytest.raises(IndexError):
        gather_units(Tensor(np.zeros((2, 5, 3))), np.array(idx))


def test_embedding_gather_accumulates_repeats(rng):
    table = rng.standard_normal((4, 3))
    idx = np.array([[0, 2, 2], [3, 0, 0]])
    assert grad_error(lambda t: T.embedding_gather(t, idx), table) < 1e-9


# -- losses and traversal ---------------------------------------------------
def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(Tensor(np.zeros((3, 5))), np.array([0, 1, 4]))
    assert loss.item() == pytest.approx(math.log(5))


def test_cross_entropy_gradient_fd(rng):
    labels = np.array([2, 0, 1])
    assert grad_error(lambda z: T.cross_entropy(z, labels), rng.standard_normal((3, 4))) < 1e-6


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_diamond_graph_visits_shared_node_once():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    z = y + y * 2.0
    backward(z)
    assert x.grad == pytest.approx(18.0)


def test_leaf_grads_accumulate_until_zeroed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    assert np.array_equal(x.grad, [6.0, 6.0])
    T.zero_grad([x])
    assert x.grad is None


def test_deep_chain_has_no_recursion_limit():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    backward(y)
    assert x.grad == 1.0


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


@settings(max_examples=30)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)), arrays(np.float64, (3,), elements=st.floats(-3, 3)))
def test_broadcast_mul_add_gradients(a, b):
    assert grad_error(lambda x, y: x * y + y, a, b) < 1e-6
