import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twincount.nncore import functional as F
from twincount.nncore import kernels
from twincount.nncore.errors import DomainError, ShapeError
from twincount.nncore.gradcheck import max_relative_error, numerical_grad
from twincount.nncore.init import leaky_relu_gain, orthogonal_
from twincount.nncore.layers import BatchNorm2d, Conv2d, Dropout, Linear, Sequential


# ---------------------------------------------------------------- loop oracles

def direct_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(n):
        for o in range(f):
            for p in range(oh):
                for q in range(ow):
                    patch = xp[i, :, p * stride:p * stride + k, q * stride:q * stride + k]
                    out[i, o, p, q] = (patch * w[o]).sum() + b[o]
    return out


def scatter_tconv(x, w, b, stride, pad, out_pad):
    """Every input pixel scatters a weighted copy of the kernel into the output."""
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full_h = (h - 1) * stride + k + out_pad
    full_w = (wd - 1) * stride + k + out_pad
    full = np.zeros((n, cout, full_h, full_w))
    for i in range(n):
        for ci in range(cin):
            for p in range(h):
                for q in range(wd):
                    full[i, :, p * stride:p * stride + k, q * stride:q * stride + k] += x[i, ci, p, q] * w[ci]
    oh = full_h - 2 * pad
    ow = full_w - 2 * pad
    return full[:, :, pad:pad + oh, pad:pad + ow] + b.reshape(1, -1, 1, 1)


conv_cases = st.tuples(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 4), st.integers(1, 3), st.integers(0, 2), st.integers(4, 9),
)


@given(conv_cases, st.integers(0, 2 ** 31))
def test_conv2d_matches_direct_loops(case, seed):
    n, c, f, k, stride, pad, size = case
    if size + 2 * pad < k:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, size, size))
    w = r.standard_normal((f, c, k, k))
    b = r.standard_normal(f)
    out, _ = F.conv2d(x, w, b, stride, pad)
    np.testing.assert_allclose(out, direct_conv(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


@given(conv_cases, st.integers(0, 2 ** 31))
def test_conv_transpose_matches_scatter(case, seed):
    n, cin, cout, k, stride, pad, size = case
    out_pad = seed % stride
    if (size - 1) * stride + k - 2 * pad + out_pad <= 0 or 2 * pad > k + out_pad:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, cin, size, size))
    w = r.standard_normal((cin, cout, k, k))
    b = r.standard_normal(cout)
    out, _ = F.conv_transpose2d(x, w, b, stride, pad, out_pad)
    np.testing.assert_allclose(out, scatter_tconv(x, w, b, stride, pad, out_pad), atol=1e-10)


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, tconv(y)> with shared weights and no bias
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    y, _ = F.conv2d(x, w, None, 2, 1)
    g = rng.standard_normal(y.shape)
    back, _ = F.conv_transpose2d(g, w, None, 2, 1, 0)
    assert np.isclose((y * g).sum(), (x * back).sum())


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_backends_agree_bitwise(k, stride, chans, seed):
    if not kernels.BACKEND == "cython":
        pytest.skip("compiled kernels not built")
    r = np.random.default_rng(seed)
    size = 7 + seed % 5
    o = (size - k) // stride + 1
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    for dtype in (np.float32, np.float64):
        x = r.standard_normal((2, chans, size, size)).astype(dtype)
        a, b = py.im2col(x, k, stride, o, o), cy.im2col(x, k, stride, o, o)
        assert a.dtype == b.dtype == dtype and np.array_equal(a, b)
        cols = r.standard_normal(a.shape).astype(dtype)
        assert np.array_equal(py.col2im(cols, 2, chans, size, size, k, stride, o, o),
                              cy.col2im(cols, 2, chans, size, size, k, stride, o, o))


@given(st.integers(0, 2 ** 31), st.booleans(), st.sampled_from([1.0, 1 - 1e-5 / 7]))
def test_elementwise_backends_agree_bitwise(seed, adaptive, keep):
    if not kernels.BACKEND == "cython":
        pytest.skip("compiled kernels not built")
    r = np.random.default_rng(seed)
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    for dtype in (np.float32, np.float64):
        x = (r.standard_normal(257) * 10).astype(dtype)
        x[:3] = 0
        y = py.leaky_relu(x, 0.2)
        assert np.array_equal(y, cy.leaky_relu(x, 0.2))
        d = r.standard_normal(257).astype(dtype)
        assert np.array_equal(py.leaky_relu_backward(d, y, 0.2), cy.leaky_relu_backward(d, y, 0.2))
        state = [r.standard_normal(300).astype(dtype) for _ in range(3)]
        state[2] = np.abs(state[2])
        g = r.standard_normal(300).astype(dtype)
        a, b = [s.copy() for s in state], [s.copy() for s in state]
        for backend, (p, m, v) in ((py, a), (cy, b)):
            for t in range(1, 4):
                backend.adam_update(p, g, m, v, 0.9, 0.999, keep, 1e-3 / (1 - 0.9 ** t),
                                    1 - 0.999 ** t, 1e-8, adaptive)
        assert all(np.array_equal(u, w) for u, w in zip(a, b))


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    cols = kernels.im2col(x, 3, 2, 3, 3)
    g = rng.standard_normal(cols.shape)
    back = kernels.col2im(g, 2, 3, 8, 8, 3, 2, 3, 3)
    assert np.isclose((cols * g).sum(), (x * back).sum())


def test_backend_selection():
    assert kernels.BACKEND in ("cython", "python")
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


# ---------------------------------------------------------------- gradients

def _check(f_and_grad, arrays, tol=1e-6):
    for name, arr in arrays.items():
        analytic = f_and_grad()[1][name]
        numeric = numerical_grad(lambda: f_and_grad()[0], arr)
        assert max_relative_error(analytic, numeric) < tol, name


def test_conv_gradients(rng):
    x = rng.standard_normal((2, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    g = rng.standard_normal(F.conv2d(x, w, b, 2, 1)[0].shape)

    def fg():
        out, cache = F.conv2d(x, w, b, 2, 1)
        dx, dw, db = F.conv2d_backward(g, cache)
        return (out * g).sum(), {"x": dx, "w": dw, "b": db}

    _check(fg, {"x": x, "w": w, "b": b})


def test_conv_backward_can_skip_input_grad(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    w = rng.standard_normal((2, 1, 3, 3))
    out, cache = F.conv2d(x, w, None, 1, 1)
    dx, dw, _ = F.conv2d_backward(np.ones_like(out), cache, input_grad=False)
    assert dx is None and dw.shape == w.shape


def test_bce_grad_zero_where_clamped():
    p = np.array([[0.0, 0.5, 1.0]])
    q = np.array([[0.2, 0.2, 0.2]])
    g = F.bce_grad(p, q)
    assert g[0, 0] == 0 and g[0, 2] == 0 and g[0, 1] != 0


def test_loss_values_by_hand():
    a = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    b = np.zeros_like(a)
    assert F.mse(a, b) == pytest.approx(0.5)
    p = np.full((1, 2, 2), 0.5)
    assert F.bce(p, np.ones_like(p)) == pytest.approx(np.log(2))
    mu = np.array([[1.0, 0.0]])
    logvar = np.zeros_like(mu)
    assert F.kld_standard_normal(mu, logvar) == pytest.approx(0.5)


def test_bce_strict_domain():
    with pytest.raises(DomainError):
        F.bce(np.array([[1.5]]), np.array([[0.5]]), strict=True)


def test_shape_errors():
    with pytest.raises(ShapeError):
        F.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), None)
    with pytest.raises(ShapeError):
        F.conv_transpose2d(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 3)), None, 2, 1, 2)
    with pytest.raises(ShapeError):
        F.linear(np.zeros((2, 3)), np.zeros((4, 5)), None)
    with pytest.raises(ShapeError):
        F.mse(np.zeros((1, 2)), np.zeros((1, 3)))


def test_batchnorm_train_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    rm, rv = np.zeros(3), np.ones(3)
    out, _ = F.batchnorm2d(x, np.ones(3), np.zeros(3), rm, rv, train=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_dropout_scaling_and_eval_identity(rng):
    x = np.ones((200, 200), np.float32)
    y, mask = F.dropout(x, 0.1, rng, train=True)
    assert abs(y.mean() - 1.0) < 0.02
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.9)}
    z, _ = F.dropout(x, 0.1, rng, train=False)
    assert z is x
    with pytest.raises(ValueError):
        F.dropout(x, 0.1, None, train=True)


def test_dtype_preserved(rng):
    x = rng.standard_normal((1, 1, 6, 6)).astype(np.float32)
    w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    assert F.conv2d(x, w, None, 1, 0)[0].dtype == np.float32
    assert F.leaky_relu(x)[0].dtype == np.float32


# ---------------------------------------------------------------- layers / init

def test_sequential_layer_backward(rng):
    net = Sequential(Conv2d(1, 2, 3, 1, 1), Dropout(0.0))
    net.reset_parameters(rng, 1.0)
    net.to_dtype(np.float64)
    x = rng.standard_normal((2, 1, 5, 5))
    out = net(x, train=True, rng=rng)
    dx = net.backward(np.ones_like(out))
    assert dx.shape == x.shape
    assert all(p.grad is not None for p in net.parameters())


def test_batchnorm_layer_eval_uses_running_stats(rng):
    bn = BatchNorm2d(2)
    x = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
    out = bn(x, train=False)
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-5)


@given(st.integers(1, 12), st.integers(1, 12), st.floats(0.1, 3.0))
def test_orthogonal_rows_or_columns_orthonormal(rows, cols, gain):
    w = orthogonal_((rows, cols), gain, np.random.default_rng(rows * 31 + cols), np.float64)
    m = w if rows <= cols else w.T
    np.testing.assert_allclose(m @ m.T, gain ** 2 * np.eye(min(rows, cols)), atol=1e-10)


def test_orthogonal_conv_shape_and_zero_gain():
    w = orthogonal_((4, 2, 3, 3), 1.0, np.random.default_rng(0))
    assert w.shape == (4, 2, 3, 3) and w.dtype == np.float32
    assert not orthogonal_((3, 3), 0.0, np.random.default_rng(0)).any()


def test_leaky_gain():
    assert leaky_relu_gain(0.0) == pytest.approx(np.sqrt(2))
    assert leaky_relu_gain(0.2) == pytest.approx(np.sqrt(2 / 1.04))


def test_linear_layer_init_zero_bias(rng):
    lin = Linear(5, 3)
    lin.reset_parameters(rng, 1.0)
    assert not lin.bias.data.any()
