"""Pure numpy versions of the compiled kernels, used when the extension is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, k, stride, oh, ow):
    x = np.ascontiguousarray(x)
    n, c, _, _ = x.shape
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(c, k, k, n, oh, ow),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * k * k, n * oh * ow)


def col2im(cols, n, c, h, w, k, stride, oh, ow):
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    blocks = cols.reshape(c, k, k, n, oh, ow)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                blocks[:, i, j].transpose(1, 0, 2, 3)
            )
    return out


def leaky_relu(x, slope):
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(dout, out, slope):
    return np.where(out > 0, dout, dout * dout.dtype.type(slope))


def adam_update(p, g, m, v, b1, b2, keep, scale, bc2, eps, adaptive):
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    if keep != 1.0:
        p *= keep
    if adaptive:
        p -= scale * m / (np.sqrt(v / bc2) + eps)
    else:
        p -= scale * m
