"""Backend selection for the hot loops (convolution unfolding, LeakyReLU, Adam).

The Cython extension is used when it was built; setting
``TWINCOUNT_PURE_PYTHON=1`` forces the numpy fallback. Both backends accumulate
in the same order and round every operation alike, so results agree bitwise.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
if os.environ.get("TWINCOUNT_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        BACKEND = "cython"
else:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py


def im2col(x, k, stride, oh, ow):
    """Unfold padded NCHW ``x`` into a ``(C*k*k, N*oh*ow)`` column matrix."""
    return _impl.im2col(x, k, stride, oh, ow)


def col2im(cols, n, c, h, w, k, stride, oh, ow):
    """Scatter-add columns back into an ``(n, c, h, w)`` image (adjoint of im2col)."""
    return _impl.col2im(cols, n, c, h, w, k, stride, oh, ow)


def leaky_relu(x, slope):
    flat = np.ascontiguousarray(x).reshape(-1)
    return _impl.leaky_relu(flat, slope).reshape(x.shape)


def leaky_relu_backward(dout, out, slope):
    """Gradient of LeakyReLU given its output (positive output iff positive input)."""
    d = np.ascontiguousarray(dout, dtype=out.dtype).reshape(-1)
    return _impl.leaky_relu_backward(d, np.ascontiguousarray(out).reshape(-1), slope).reshape(out.shape)


def adam_update(p, g, m, v, b1, b2, keep, scale, bc2, eps, adaptive):
    """In-place Adam step on contiguous arrays ``p``, ``m``, ``v`` (``keep`` = 1 - decay)."""
    if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adam_update needs C-contiguous parameter and moment arrays")
    g = np.ascontiguousarray(g, dtype=p.dtype).reshape(-1)
    _impl.adam_update(p.reshape(-1), g, m.reshape(-1), v.reshape(-1), b1, b2, keep, scale,
                      bc2, eps, bool(adaptive))


def get_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
