import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deskdetr import tensor as T
from deskdetr.exceptions import DimensionError, NumericError, ParameterError
from deskdetr.tensor import Tensor, check_gradients

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- matmul ------------------------------------------------------------------------------
def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)


def test_matmul_hand_value():
    assert np.array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_zero():
    out = Tensor(np.zeros((2, 3))) @ Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- softmax -----------------------------------------------------------------------------
def test_softmax_values():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0, rtol=1e-15)
    big = T.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [0.5, 0.5])
    assert np.allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.zeros((2, 0))), axis=-1)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(x):
    s = T.softmax(Tensor(x), axis=-1).data.sum(axis=-1)
    assert np.all(np.abs(s - 1.0) <= 1e-12)


# -- elementwise -------------------------------------------------------------------------
def test_elementwise_examples():
    assert np.array_equal(T.reverse_along_axis(Tensor([[1.0, 2.0, 3.0]]), -1).data, [[3, 2, 1]])
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    x = leaf(-2.0)
    y = T.relu(x)
    y.backward()
    assert y.item() == 0.0 and x.grad == 0.0


def test_numeric_errors():
    with pytest.raises(NumericError):
        Tensor([1.0, 2.0]) / Tensor([1.0, 0.0])
    with pytest.raises(NumericError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(NumericError):
        T.log(Tensor([-1.0]))


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


@given(arrays(np.float64, (2, 4), elements=finite))
def test_reverse_is_involution(x):
    t = Tensor(x)
    assert np.array_equal(T.reverse_along_axis(T.reverse_along_axis(t, -1), -1).data, x)


# -- normalization ---------------------------------------------------------------------------
def test_groupnorm_examples():
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    const = Tensor(np.full((1, 2, 3, 3), 7.0))
    assert np.array_equal(T.groupnorm(const, 1, gamma, beta).data, np.zeros((1, 2, 3, 3)))
    x = Tensor(np.array([1.0, -1.0]).reshape(1, 2, 1, 1))
    eps = 1e-5
    expected = np.array([1.0, -1.0]) / np.sqrt(1.0 + eps)
    assert np.allclose(T.groupnorm(x, 1, gamma, beta, eps).data.reshape(-1), expected, atol=1e-15)
    fives = T.groupnorm(Tensor(np.random.default_rng(0).normal(size=(2, 2, 3, 3))), 2,
                        Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)))
    assert np.array_equal(fives.data, np.full((2, 2, 3, 3), 5.0))


def test_groupnorm_indivisible_groups():
    with pytest.raises(DimensionError):
        T.groupnorm(Tensor(np.ones((1, 3, 2, 2))), 2, Tensor(np.ones(3)), Tensor(np.zeros(3)))


@given(arrays(np.float64, (2, 3, 2, 2), elements=finite))
def test_groupnorm_one_group_equals_layernorm(x):
    gn = T.groupnorm(Tensor(x), 1, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    flat = x.reshape(2, -1)
    ln = T.layernorm(Tensor(flat), Tensor(np.ones(12)), Tensor(np.zeros(12))).data
    assert np.allclose(gn.reshape(2, -1), ln, atol=1e-12)


# -- conv2d -------------------------------------------------------------------------------
def test_conv_examples():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
    ident = np.eye(3)[:, :, None, None]
    assert np.allclose(T.conv2d(Tensor(x), Tensor(ident)).data, x, atol=0)
    img = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert np.array_equal(T.conv2d(img, Tensor(np.ones((1, 1, 2, 2)))).data.reshape(-1), [10.0])
    zero = T.conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), padding=1)
    assert np.array_equal(zero.data, np.zeros((1, 2, 4, 5)))


def test_conv_bad_stride():
    with pytest.raises(ParameterError):
        T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 1, 1))), stride=0)


# -- bilinear sampling ---------------------------------------------------------------------------
def test_bilinear_examples():
    f = Tensor(np.arange(12.0).reshape(1, 3, 4))
    # pixel (row 1, col 2) has its centre at (x, y) = (2.5, 1.5)
    assert T.bilinear_sample(f, [[2.5, 1.5]]).data[0, 0] == 6.0
    const = Tensor(np.full((2, 5, 5), 3.25))
    pts = np.random.default_rng(0).uniform(0, 5, size=(20, 2))
    assert np.allclose(T.bilinear_sample(const, pts).data, 3.25, atol=1e-15)
    ramp = Tensor(np.array([[[0.0, 4.0]]]))
    assert T.bilinear_sample(ramp, [[1.0, 0.5]]).data[0, 0] == 2.0


def test_bilinear_empty_points():
    with pytest.raises(DimensionError):
        T.bilinear_sample(Tensor(np.ones((1, 2, 2))), np.zeros((0, 2)))


# -- gradient checking -----------------------------------------------------------------------------
def test_gradcheck_square():
    x = leaf([3.0])
    report = check_gradients(lambda: (x * x).sum(), [x])
    x.grad = None
    (x * x).sum().backward()
    assert x.grad[0] == 6.0
    assert report.passed(1e-4)


def test_gradcheck_constant():
    x = leaf([1.0, 2.0])
    report = check_gradients(lambda: (x * 0.0).sum() + 4.0, [x])
    assert report.max_abs_error == 0.0
    x.grad = None
    ((x * 0.0).sum() + 4.0).backward()
    assert np.array_equal(x.grad, [0.0, 0.0])


UNARY = {
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "exp": T.exp,
    "relu": T.relu,
    "abs": T.abs_,
    "square": lambda a: T.power(a, 2.0),
    "clamp": lambda a: T.clamp(a, -0.5, 0.5),
    "log": lambda a: T.log(T.exp(a) + 1.0),
    "softmax": lambda a: T.softmax(a, axis=-1) * Tensor(np.arange(4.0)),
    "reverse": lambda a: T.reverse_along_axis(a, -1) * Tensor(np.arange(4.0)),
    "mean": lambda a: T.mean(a, axis=0),
    "slice": lambda a: a[:, 1:3],
    "fancy": lambda a: a[np.array([0, 0, 2])],
    "transpose": lambda a: a.transpose(1, 0) @ Tensor(np.ones((3, 2))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_unary_gradients(name, x):
    # keep clear of kinks where central differences are meaningless
    if name in ("relu", "abs"):
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    if name == "clamp":
        x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, 0.1, x)
    t = leaf(x)
    weights = Tensor(np.random.default_rng(0).normal(size=UNARY[name](Tensor(x)).shape))
    report = check_gradients(lambda: (UNARY[name](t) * weights).sum(), [t])
    assert report.passed(1e-4), report


@given(a=arrays(np.float64, (2, 3), elements=st.floats(-2, 2)), b=arrays(np.float64, (3,), elements=st.floats(0.5, 2)))
def test_binary_gradients(a, b):
    assume(np.all(np.abs(a - b) > 1e-3) and np.all(np.abs(a - 0.1 * b) > 1e-3))
    ta, tb = leaf(a), leaf(b)
    f = lambda: ((ta + tb) * ta - ta / tb + T.maximum(ta, tb * 0.1) - T.minimum(ta, tb)).sum()  # noqa: E731
    assert check_gradients(f, [ta, tb]).passed(1e-4)


def test_structural_gradients(rng):
    x, y = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
    w = Tensor(rng.normal(size=(4, 3)))
    report = check_gradients(lambda: (T.concat([x, y], axis=0) * w).sum() + (T.stack([x, y], 0) ** 2).sum(), [x, y])
    assert report.passed(1e-4)
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    assert check_gradients(lambda: ((a @ b) ** 2).mean(), [a, b]).passed(1e-4)


def test_norm_gradients(rng):
    x = leaf(rng.normal(size=(2, 4, 3, 3)))
    g, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    w = Tensor(rng.normal(size=(2, 4, 3, 3)))
    assert check_gradients(lambda: (T.groupnorm(x, 2, g, b) * w).sum(), [x, g, b]).passed(1e-4)
    y = leaf(rng.normal(size=(3, 5)))
    g2, b2 = leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    w2 = Tensor(rng.normal(size=(3, 5)))
    assert check_gradients(lambda: (T.layernorm(y, g2, b2) * w2).sum(), [y, g2, b2]).passed(1e-4)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_gradients(rng, stride, padding):
    x = leaf(rng.normal(size=(2, 2, 5, 5)))
    k = leaf(rng.normal(size=(3, 2, 3, 3)))
    bias = leaf(rng.normal(size=3))
    out_shape = T.conv2d(Tensor(x.data), Tensor(k.data), stride=stride, padding=padding).shape
    w = Tensor(rng.normal(size=out_shape))
    assert check_gradients(lambda: (T.conv2d(x, k, bias, stride, padding) * w).sum(), [x, k, bias]).passed(1e-4)


def test_bilinear_gradient(rng):
    f = leaf(rng.normal(size=(2, 4, 5)))
    pts = rng.uniform(0, 5, size=(7, 2))
    w = Tensor(rng.normal(size=(2, 7)))
    assert check_gradients(lambda: (T.bilinear_sample(f, pts) * w).sum(), [f]).passed(1e-4)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = (x * 2.0).sum()
    assert y._backward is None and not y.requires_grad


def test_nan_is_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0]) * Tensor([np.nan])


def test_gradient_accumulates_over_reuse():
    x = leaf([2.0])
    (x * x + x).sum().backward()
    assert x.grad[0] == 5.0
