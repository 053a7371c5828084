"""Forward/backward pairs for every differentiable operation the model uses.

Each forward returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and the cache. All ops keep the dtype of their inputs, so the
same code runs in float32 for training and float64 for gradient checks.
"""

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import DomainError, ShapeError

BN_EPS = 1e-5
BCE_EPS = 1e-7


def conv_out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def tconv_out_size(n, k, stride, padding, output_padding=0):
    return (n - 1) * stride + k - 2 * padding + output_padding


def _check_nchw(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be NCHW (4-D), got shape {x.shape}")


def conv2d(x, weight, bias, stride=1, padding=0):
    _check_nchw(x)
    n, c, h, w = x.shape
    f, wc, k, k2 = weight.shape
    if wc != c:
        raise ShapeError(f"channel axis mismatch: input has {c}, weight expects {wc}")
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}x{k2}")
    for axis, extent in (("height", h), ("width", w)):
        if extent + 2 * padding < k:
            raise ShapeError(
                f"{axis} axis: padded extent {extent + 2 * padding} smaller than kernel {k}"
            )
    oh = conv_out_size(h, k, stride, padding)
    ow = conv_out_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = kernels.im2col(np.ascontiguousarray(xp), k, stride, oh, ow)
    out = weight.reshape(f, -1) @ cols
    out = out.reshape(f, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, f, 1, 1)
    cache = (x.shape, xp.shape, weight, cols, stride, padding, oh, ow)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache, input_grad=True):
    (n, c, h, w), (_, _, hp, wp), weight, cols, stride, padding, oh, ow = cache
    f, _, k, _ = weight.shape
    dmat = dout.transpose(1, 0, 2, 3).reshape(f, -1)
    dweight = (dmat @ cols.T).reshape(weight.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    if not input_grad:
        return None, dweight, dbias
    dcols = np.ascontiguousarray(weight.reshape(f, -1).T @ dmat)
    dxp = kernels.col2im(dcols, n, c, hp, wp, k, stride, oh, ow)
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dx), dweight, dbias


def conv_transpose2d(x, weight, bias, stride=1, padding=0, output_padding=0):
    """Transposed convolution; ``weight`` is laid out ``(C_in, C_out, k, k)``."""
    _check_nchw(x)
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"channel axis mismatch: input has {cin}, weight expects {wcin}")
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}x{k2}")
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError(f"output_padding {output_padding} must be in [0, stride)")
    oh = tconv_out_size(h, k, stride, padding, output_padding)
    ow = tconv_out_size(w, k, stride, padding, output_padding)
    for axis, extent in (("height", oh), ("width", ow)):
        if extent <= 0:
            raise ShapeError(f"{axis} axis: transposed conv output extent {extent} <= 0")
    hp = (h - 1) * stride + k + output_padding
    wp = (w - 1) * stride + k + output_padding
    xmat = x.transpose(1, 0, 2, 3).reshape(cin, -1)
    cols = np.ascontiguousarray(weight.reshape(cin, -1).T @ xmat)
    full = kernels.col2im(cols, n, cout, hp, wp, k, stride, h, w)
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + bias.reshape(1, cout, 1, 1)
    cache = (x.shape, (hp, wp), weight, xmat, stride, padding, oh, ow)
    return np.ascontiguousarray(out), cache


def conv_transpose2d_backward(dout, cache):
    (n, cin, h, w), (hp, wp), weight, xmat, stride, padding, oh, ow = cache
    _, cout, k, _ = weight.shape
    dfull = np.zeros((n, cout, hp, wp), dtype=dout.dtype)
    dfull[:, :, padding:padding + oh, padding:padding + ow] = dout
    dcols = kernels.im2col(dfull, k, stride, h, w)
    dweight = (xmat @ dcols.T).reshape(weight.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    dx = (weight.reshape(cin, -1) @ dcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dweight, dbias


def linear(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"feature axis mismatch: input {x.shape}, weight expects {weight.shape[1]} features"
        )
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight)


def linear_backward(dout, cache):
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def leaky_relu(x, slope=0.2):
    if slope < 0:
        raise ValueError("leaky slope must be nonnegative")
    out = kernels.leaky_relu(x, slope)
    return out, (out, slope)


def leaky_relu_backward(dout, cache):
    out, slope = cache
    return kernels.leaky_relu_backward(dout, out, slope)


def sigmoid(x):
    out = expit(x)
    return out, out


def sigmoid_backward(dout, out):
    return dout * out * (1 - out)


def dropout(x, rate, rng=None, train=False):
    if not train or rate == 0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def batchnorm2d(x, gamma, beta, running_mean, running_var, train=False,
                momentum=0.1, eps=BN_EPS):
    """Batch norm over (N, H, W). Running statistics are updated in place in train mode."""
    _check_nchw(x)
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"channel axis mismatch: input has {x.shape[1]}, norm has {gamma.shape[0]}")
    shape = (1, -1, 1, 1)
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, train)


def batchnorm2d_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    shape = (1, -1, 1, 1)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    dx = (inv_std.reshape(shape) / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- losses

def _item_mean(v):
    return v.reshape(v.shape[0], -1).mean(axis=1)


def _reduce_weights(n, weights, dtype):
    if weights is None:
        return np.full(n, 1.0 / n, dtype=dtype)
    return np.asarray(weights, dtype=dtype)


def mse(a, b, reduction="mean"):
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    per_item = _item_mean((a - b) ** 2)
    return per_item.mean() if reduction == "mean" else per_item


def mse_grad(a, b, weights=None):
    """Gradient w.r.t. ``a`` of ``sum_i weights[i] * mse_i`` (batch mean if ``weights`` is None)."""
    n = a.shape[0]
    per_elem = a[0].size
    wts = _reduce_weights(n, weights, a.dtype).reshape((n,) + (1,) * (a.ndim - 1))
    return (2.0 / per_elem) * (a - b) * wts


def _check_unit_interval(v, name):
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise DomainError(f"bce {name} must lie in [0, 1]")


def bce(p, q, reduction="mean", eps=BCE_EPS, strict=False):
    """Binary cross entropy of prediction ``p`` against target ``q``."""
    if p.shape != q.shape:
        raise ShapeError(f"bce operands differ in shape: {p.shape} vs {q.shape}")
    if strict:
        _check_unit_interval(p, "prediction")
        _check_unit_interval(q, "target")
    pc = np.clip(p, eps, 1 - eps)
    per_elem = -(q * np.log(pc) + (1 - q) * np.log1p(-pc))
    per_item = _item_mean(per_elem)
    return per_item.mean() if reduction == "mean" else per_item


def bce_grad(p, q, weights=None, eps=BCE_EPS):
    n = p.shape[0]
    per_elem = p[0].size
    wts = _reduce_weights(n, weights, p.dtype).reshape((n,) + (1,) * (p.ndim - 1))
    pc = np.clip(p, eps, 1 - eps)
    g = (pc - q) / (pc * (1 - pc))
    g = np.where((p > eps) & (p < 1 - eps), g, 0)
    return g * wts / per_elem


def kld_standard_normal(mu, logvar, reduction="mean"):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, per item or batch mean."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu/logvar differ in shape: {mu.shape} vs {logvar.shape}")
    per_item = -0.5 * (1 + logvar - mu ** 2 - np.exp(logvar)).reshape(mu.shape[0], -1).sum(axis=1)
    return per_item.mean() if reduction == "mean" else per_item


def kld_grad(mu, logvar, weights=None):
    n = mu.shape[0]
    wts = _reduce_weights(n, weights, mu.dtype).reshape((n,) + (1,) * (mu.ndim - 1))
    return mu * wts, 0.5 * (np.exp(logvar) - 1) * wts
