import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from muscleseg.autograd import (AdamState, NonFiniteGradientError, SELU_ALPHA, SELU_LAMBDA, Tensor, adam_step, add,
                                concat, conv3d, conv3d_transpose, no_grad, residual_combine, selu, sigmoid,
                                soft_dice_loss)
from gradcheck import OPS, check_op, random_case
from oracles import naive_conv3d, naive_conv3d_transpose


def _rand_conv(rng, k, stride):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    sp = tuple(rng.integers(1, 4, size=3) * 2)
    x = rng.standard_normal((n, cin) + sp)
    w = rng.standard_normal((cout, cin, k, k, k))
    b = rng.standard_normal(cout)
    return x, w, b


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("k,stride", [(5, 1), (1, 1), (2, 2)])
def test_conv_matches_direct_sum(backend, seed, k, stride):
    rng = np.random.default_rng(seed)
    x, w, b = _rand_conv(rng, k, stride)
    pad = (k - 1) // 2 if stride == 1 else 0
    got = conv3d(x, w, b, stride=stride).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, b, stride, pad), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_transpose_matches_scatter(backend, seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((1, 2) + tuple(rng.integers(1, 4, size=3)))
    w = rng.standard_normal((2, 3, 2, 2, 2))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(conv3d_transpose(x, w, b).data, naive_conv3d_transpose(x, w, b), atol=1e-10)


def test_conv_examples():
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 4, 5))
    ident = conv3d(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1)).data
    np.testing.assert_array_equal(ident, x)
    ones = conv3d(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 2, 2, 2)), None, stride=1, padding=0).data
    assert ones.shape == (1, 1, 1, 1, 1) and ones.item() == 8.0
    assert conv3d(np.ones((1, 1, 8, 8, 8)), np.ones((2, 1, 5, 5, 5))).shape == (1, 2, 8, 8, 8)
    assert conv3d(np.ones((1, 1, 8, 8, 8)), np.ones((2, 1, 2, 2, 2)), stride=2).shape == (1, 2, 4, 4, 4)
    assert conv3d_transpose(np.ones((1, 1, 4, 4, 4)), np.ones((1, 1, 2, 2, 2))).shape == (1, 1, 8, 8, 8)


def test_conv_argument_errors():
    x = np.ones((1, 2, 4, 4, 4))
    with pytest.raises(ValueError):
        conv3d(x, np.ones((1, 3, 5, 5, 5)))
    with pytest.raises(ValueError):
        conv3d(x, np.ones((1, 2, 3, 3, 3)))
    with pytest.raises(ValueError):
        conv3d(np.ones((1, 2, 5, 4, 4)), np.ones((1, 2, 2, 2, 2)), stride=2)
    with pytest.raises(ValueError):
        conv3d(x, np.ones((1, 2, 2, 2, 2)), stride=3)
    with pytest.raises(ValueError):
        conv3d_transpose(x, np.ones((3, 1, 2, 2, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_transpose_is_adjoint(backend, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 6, 2))
    w = rng.standard_normal((4, 3, 2, 2, 2))
    y = rng.standard_normal((2, 4, 2, 3, 1))
    lhs = np.sum(conv3d(x, w, None, stride=2).data * y)
    rhs = np.sum(x * conv3d_transpose(y, w).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linear_in_input(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 5, 5, 5))
    lhs = conv3d(a * x + b * y, w).data
    rhs = a * conv3d(x, w).data + b * conv3d(y, w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * max(1, abs(a), abs(b)) * 50)


def test_backends_agree_float32():
    from muscleseg._accel import backend_scope
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 8, 16)).astype(np.float32)
    w = (rng.standard_normal((4, 3, 5, 5, 5)) * 0.1).astype(np.float32)
    out = {}
    for be in ("numpy", "numba"):
        with backend_scope(be):
            t = Tensor(x, requires_grad=True)
            wt = Tensor(w, requires_grad=True)
            y = conv3d(t, wt)
            add(y, y).backward(np.ones(y.shape, np.float32))
            out[be] = (y.data, t.grad, wt.grad)
    for a, b in zip(out["numpy"], out["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)


@pytest.mark.parametrize("op", OPS)
def test_gradients_finite_difference(backend, op):
    rng = np.random.default_rng(hash(op) % 2 ** 32)
    for _ in range(3):
        build, arrays = random_case(op, rng)
        assert check_op(build, arrays, rng) < 1e-4


def test_selu_values():
    assert selu(np.array([0.0])).data[0] == 0.0
    assert selu(np.array([1.0])).data[0] == SELU_LAMBDA == 1.0507009873554805
    v = selu(np.array([-30.0])).data[0]
    assert v == pytest.approx(-SELU_LAMBDA * SELU_ALPHA * (1 - np.exp(-30)), rel=1e-15)
    assert v == pytest.approx(-1.7580993408473766, rel=1e-14)


def test_sigmoid_values_and_stability():
    assert sigmoid(np.array([0.0])).data[0] == 0.5
    x = np.random.default_rng(0).standard_normal(100) * 20
    np.testing.assert_allclose(sigmoid(-x).data, 1 - sigmoid(x).data, atol=1e-12)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        s = sigmoid(np.array([-1000.0, -500.0, 500.0, 1000.0])).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[-1] == 1.0


def test_sigmoid_derivative():
    x = np.linspace(-6, 6, 25)
    t = Tensor(x, requires_grad=True)
    sigmoid(t).backward(np.ones_like(x))
    h = 1e-6
    num = (sigmoid(x + h).data - sigmoid(x - h).data) / (2 * h)
    np.testing.assert_allclose(t.grad, num, rtol=1e-6)


def test_residual_examples():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 1, 2, 4, 4, 4))
    np.testing.assert_array_equal(residual_combine(a, b).data, a + b)
    np.testing.assert_array_equal(residual_combine(a, np.zeros_like(a)).data, a)
    c = rng.standard_normal((1, 3, 4, 4, 4))
    out = residual_combine(a, c, np.zeros((3, 2, 1, 1, 1)))
    np.testing.assert_array_equal(out.data, c)
    with pytest.raises(ValueError):
        residual_combine(a, c)
    with pytest.raises(ValueError):
        residual_combine(a, rng.standard_normal((1, 2, 4, 4, 2)))


def test_dice_examples():
    g = np.zeros((1, 1, 4, 4, 4))
    g[..., :2] = 1
    assert soft_dice_loss(g, g).item() == pytest.approx(0.0, abs=1e-5)
    assert soft_dice_loss(1 - g, g).item() == pytest.approx(1.0, abs=1e-5)
    assert soft_dice_loss(np.array([1.0, 0.0]), np.array([1.0, 1.0])).item() == pytest.approx(1 / 3, abs=1e-6)
    with pytest.raises(ValueError):
        soft_dice_loss(g, g[..., :2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dice_range_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = rng.random(30)
    g = (rng.random(30) < 0.5).astype(float)
    v = soft_dice_loss(p, g).item()
    assert -1e-12 <= v <= 1.0 + 1e-6
    perm = rng.permutation(30)
    assert soft_dice_loss(p[perm], g[perm]).item() == pytest.approx(v, abs=1e-12)


def test_no_grad_records_nothing():
    t = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = selu(t)
    assert y.parents == () and y.backward_fn is None


def test_gradient_accumulates_through_shared_input():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    add(t, t).backward(np.ones(2))
    np.testing.assert_array_equal(t.grad, [2.0, 2.0])


def test_concat_shapes():
    a, b = np.zeros((1, 2, 2, 2, 2)), np.ones((1, 3, 2, 2, 2))
    assert concat([a, b]).shape == (1, 5, 2, 2, 2)


# ------------------------------------------------------------------ adam

def _reference_adam(theta, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        out.append(theta)
    return out


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = [np.zeros(4)]
    g = np.array([3.0, -0.5, 1e-2, 100.0])
    adam_step(p, [g], AdamState())
    np.testing.assert_allclose(np.abs(p[0]), 1e-4 * np.abs(g) / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_matches_scalar_reference():
    grads = [0.3, -1.2, 0.7, 2.0, -0.1, 0.0, 0.5, -0.8, 1.1, 0.25]
    p = [np.array([0.5])]
    st_ = AdamState()
    ours = []
    for g in grads:
        adam_step(p, [np.array([g])], st_)
        ours.append(p[0][0])
    np.testing.assert_allclose(ours, _reference_adam(0.5, grads), rtol=0, atol=1e-12)
    assert st_.step == 10


def test_adam_rejects_non_finite_without_update():
    p = [np.ones(2)]
    with pytest.raises(NonFiniteGradientError):
        adam_step(p, [np.array([1.0, np.nan])], AdamState())
    np.testing.assert_array_equal(p[0], 1.0)
    with pytest.raises(ValueError):
        AdamState(step=-1)
