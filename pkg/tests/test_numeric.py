import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stforecast import numeric as nx
from stforecast.numeric import ConfigurationError, DimensionError, NumericError, Param, Tensor

RNG = np.random.default_rng(1234)


def params(*shapes, lo=-1.0, hi=1.0):
    return [Param(RNG.uniform(lo, hi, s), f"p{i}") for i, s in enumerate(shapes)]


def weighted(out, seed=0):
    w = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    return nx.tsum(out * w)


# -- forward values -----------------------------------------------------------

def test_matmul_examples():
    npt.assert_array_equal(nx.matmul(np.eye(2), np.array([[1.0, 2], [3, 4]])).data, [[1, 2], [3, 4]])
    npt.assert_array_equal(nx.matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])).data, [[11]])
    npt.assert_array_equal(nx.matmul(np.zeros((2, 3)), RNG.normal(size=(3, 4))).data, np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def _conv_loop(x, kernel, bias):
    # direct cross-correlation with zero padding, one output element at a time
    h, w, cin = x.shape
    k = kernel.shape[0]
    r = k // 2
    out = np.zeros((h, w, kernel.shape[3]))
    for i in range(h):
        for j in range(w):
            for o in range(kernel.shape[3]):
                acc = bias[o]
                for di in range(k):
                    for dj in range(k):
                        ii, jj = i + di - r, j + dj - r
                        if 0 <= ii < h and 0 <= jj < w:
                            acc += np.dot(x[ii, jj], kernel[di, dj, :, o])
                out[i, j, o] = acc
    return out


def test_conv_identity_kernel():
    x = RNG.normal(size=(4, 5, 1))
    out = nx.conv2d_same(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    npt.assert_array_equal(out.data, x)


def test_conv_all_ones_counts_window():
    out = nx.conv2d_same(np.ones((5, 5, 1)), np.ones((3, 3, 1, 1)), np.zeros(1)).data[..., 0]
    assert out[2, 2] == 9
    assert out[0, 0] == out[4, 4] == out[0, 4] == 4
    assert out[0, 2] == 6


def test_conv_zero_kernel_gives_bias():
    out = nx.conv2d_same(RNG.normal(size=(3, 3, 2)), np.zeros((3, 3, 2, 4)), np.arange(4.0))
    npt.assert_array_equal(out.data, np.broadcast_to(np.arange(4.0), (3, 3, 4)))


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_direct_loop(k):
    x = RNG.normal(size=(5, 6, 3))
    kernel = RNG.normal(size=(k, k, 3, 2))
    bias = RNG.normal(size=2)
    npt.assert_allclose(nx.conv2d_same(x, kernel, bias).data, _conv_loop(x, kernel, bias), atol=1e-12)


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigurationError):
        nx.conv2d_same(np.ones((4, 4, 1)), np.ones((2, 2, 1, 1)), np.zeros(1))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 7), w=st.integers(1, 7), half=st.integers(0, 3), batch=st.integers(0, 2))
def test_conv_preserves_spatial_shape(h, w, half, batch):
    k = 2 * half + 1
    shape = (h, w, 2) if batch == 0 else (batch, h, w, 2)
    out = nx.conv2d_same(np.ones(shape), np.ones((k, k, 2, 3)), np.zeros(3))
    assert out.shape == shape[:-1] + (3,)


def test_activation_examples():
    assert nx.tanh(np.array(0.0)).item() == 0.0
    assert nx.sigmoid(np.array(0.0)).item() == 0.5
    npt.assert_array_equal(nx.concat([np.array([1.0, 2]), np.array([3.0])]).data, [1, 2, 3])


def test_sigmoid_extremes_are_finite():
    out = nx.sigmoid(np.array([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    npt.assert_allclose(out, [0.0, 1.0], atol=1e-300)


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(1, 4), min_size=1, max_size=4), rows=st.integers(1, 3))
def test_concat_split_identity(sizes, rows):
    parts = [RNG.normal(size=(rows, s)) for s in sizes]
    back = nx.split(nx.concat(parts, axis=-1), sizes, axis=-1)
    for a, b in zip(parts, back):
        npt.assert_array_equal(a, b.data)


def test_softmax_matches_formula():
    a = RNG.normal(size=(3, 5))
    e = np.exp(a)
    npt.assert_allclose(nx.softmax(a).data, e / e.sum(axis=-1, keepdims=True), rtol=1e-13)


def test_forward_ops_deterministic():
    x = RNG.normal(size=(2, 4, 4, 2))
    kern = RNG.normal(size=(3, 3, 2, 3))
    a = nx.tanh(nx.conv2d_same(x, kern, np.zeros(3))).data
    b = nx.tanh(nx.conv2d_same(x, kern, np.zeros(3))).data
    assert a.tobytes() == b.tobytes()


# -- gradients ----------------------------------------------------------------

def _assert_grad(fn, ps, eps=1e-5):
    assert nx.grad_check(fn, ps, eps) < 1e-4


def test_grad_check_closed_form():
    x = Param(np.array([1.0, 2.0]), "x")
    out = nx.tsum(nx.square(x))
    out.backward()
    npt.assert_allclose(x.grad, [2.0, 4.0])
    x.zero_grad()
    assert nx.grad_check(lambda: nx.tsum(nx.square(x)), [x]) < 1e-8


def test_grad_check_constant_function():
    x = Param(np.array([0.3, -0.2]), "x")
    assert nx.grad_check(lambda: nx.tsum(x * 0.0) + 5.0, [x]) < 1e-6


def test_grad_check_rejects_bad_eps():
    x = Param(np.ones(2), "x")
    with pytest.raises(ConfigurationError):
        nx.grad_check(lambda: nx.tsum(x), [x], eps=1e-2)


def test_grad_check_names_nonfinite_param():
    # finite at the base point, overflows once nudged up by eps
    x = Param(np.array([709.782]), "weights")
    with pytest.raises(NumericError, match="weights"), np.errstate(over="ignore"):
        nx.grad_check(lambda: nx.tsum(nx.exp(x)), [x], eps=1e-3)
    y = Param(np.array([1.0]), "bias")
    with pytest.raises(NumericError, match="bias"), np.errstate(over="ignore"):
        nx.grad_check(lambda: nx.tsum(nx.exp(y * 1e6)), [y])


def test_grad_check_restores_values():
    x = Param(RNG.normal(size=3), "x")
    before = x.data.copy()
    nx.grad_check(lambda: nx.tsum(nx.tanh(x)), [x])
    assert x.data.tobytes() == before.tobytes()
    npt.assert_array_equal(x.grad, 0.0)


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
    ("sub", lambda a, b: nx.sub(a, b), [(3, 4), (3, 1)]),
    ("mul", lambda a, b: nx.mul(a, b), [(3, 4), (3, 4)]),
    ("square", lambda a: nx.square(a), [(5,)]),
    ("tanh", lambda a: nx.tanh(a), [(2, 3)]),
    ("sigmoid", lambda a: nx.sigmoid(a), [(2, 3)]),
    ("exp", lambda a: nx.exp(a), [(4,)]),
    ("sum_axis", lambda a: nx.tsum(a, axis=0), [(3, 2)]),
    ("mean", lambda a: nx.mean(a, axis=-1), [(3, 2)]),
    ("reshape", lambda a: nx.reshape(a, (2, 6)), [(3, 4)]),
    ("transpose", lambda a: nx.transpose(a), [(3, 4)]),
    ("getitem", lambda a: nx.getitem(a, (slice(None), [0, 2, 2])), [(2, 3)]),
    ("concat", lambda a, b: nx.concat([a, b], axis=0), [(2, 3), (1, 3)]),
    ("stack", lambda a, b: nx.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    ("matmul", lambda a, b: nx.matmul(a, b), [(2, 3, 4), (4, 5)]),
    ("linear", lambda x, w, b: nx.linear(x, w, b), [(3, 4), (2, 4), (2,)]),
    ("softmax", lambda a: nx.softmax(a, axis=-1), [(3, 5)]),
    ("where", lambda a, b: nx.where(np.array([True, False, True]), a, b), [(2, 3), (2, 3)]),
    ("conv", lambda x, k, b: nx.conv2d_same(x, k, b), [(2, 4, 4, 2), (3, 3, 2, 3), (3,)]),
])
def test_op_gradients(name, fn, shapes):
    ps = params(*shapes)
    _assert_grad(lambda: weighted(fn(*ps)), ps)


def test_split_gradient():
    (a,) = params((2, 5))
    _assert_grad(lambda: weighted(nx.split(a, [2, 3], axis=-1)[1]) + weighted(nx.split(a, [2, 3])[0], 1), [a])


def test_lstm_cell_gradient_with_skipped_rows():
    x, hc, wi, wh, b = params((3, 2), (3, 8), (2, 16), (4, 16), (16,))
    valid = np.array([True, False, True])
    _assert_grad(lambda: weighted(nx.lstm_cell(x, hc, wi, wh, b, valid)), [x, hc, wi, wh, b])


def _lstm_reference(x, h, c, wi, wh, b):
    z = x @ wi + h @ wh + b
    d = h.shape[-1]
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, o, g = sig(z[:, :d]), sig(z[:, d:2 * d]), sig(z[:, 2 * d:3 * d]), np.tanh(z[:, 3 * d:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def test_lstm_cell_matches_reference():
    x, h, c = RNG.normal(size=(4, 3)), RNG.normal(size=(4, 2)), RNG.normal(size=(4, 2))
    wi, wh, b = RNG.normal(size=(3, 8)), RNG.normal(size=(2, 8)), RNG.normal(size=8)
    out = nx.lstm_cell(x, np.concatenate([h, c], axis=1), wi, wh, b).data
    h_ref, c_ref = _lstm_reference(x, h, c, wi, wh, b)
    npt.assert_allclose(out[:, :2], h_ref, rtol=1e-12)
    npt.assert_allclose(out[:, 2:], c_ref, rtol=1e-12)


def test_lstm_cell_skipped_row_ignores_garbage():
    hc = RNG.normal(size=(2, 4))
    wi, wh, b = RNG.normal(size=(3, 8)), RNG.normal(size=(2, 8)), RNG.normal(size=8)
    valid = np.array([True, False])
    x1 = RNG.normal(size=(2, 3))
    x2 = x1.copy()
    x2[1] = [np.nan, 1e300, -np.inf]
    a = nx.lstm_cell(x1, hc, wi, wh, b, valid).data
    b2 = nx.lstm_cell(x2, hc, wi, wh, b, valid).data
    assert a.tobytes() == b2.tobytes()
    assert a[1].tobytes() == hc[1].tobytes()


# -- tape mechanics -----------------------------------------------------------

def test_gradients_accumulate_across_backward_calls():
    x = Param(np.array([1.0, -2.0]), "x")
    nx.tsum(x * 3.0).backward()
    nx.tsum(x * 3.0).backward()
    npt.assert_array_equal(x.grad, [6.0, 6.0])
    nx.zero_grads([x])
    npt.assert_array_equal(x.grad, 0.0)
    assert x.grad.shape == x.data.shape


def test_shared_subexpression_gradient():
    x = Param(np.array(0.7), "x")
    y = nx.tanh(x)
    (y * y + y).backward()
    t = np.tanh(0.7)
    npt.assert_allclose(x.grad, (2 * t + 1) * (1 - t * t), rtol=1e-13)


def test_no_grad_builds_no_tape():
    x = Param(np.ones(3), "x")
    with nx.no_grad():
        y = nx.tanh(x) * 2.0
    assert not y.requires_grad
    assert isinstance(y, Tensor)


def test_frozen_param_gets_no_grad():
    x = Param(np.ones(2), "x")
    w = Param(np.ones(2), "w")
    w.requires_grad = False
    nx.tsum(x * w).backward()
    npt.assert_array_equal(w.grad, 0.0)
    npt.assert_array_equal(x.grad, 1.0)
