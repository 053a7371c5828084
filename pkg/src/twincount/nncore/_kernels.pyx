# Compiled hot loops: im2col / col2im, LeakyReLU and the fused Adam update.
# Operation order matches the numpy fallback so both backends agree bitwise.
cimport cython
from libc.math cimport sqrt, sqrtf
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int oh, int ow):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t c, i, j, n, p, q, row, col
    cdef Py_ssize_t plane = oh * ow
    cdef real* src
    cdef real* dst
    dtype = np.float32 if real is float else np.float64
    out = np.empty((chans * k * k, n_img * plane), dtype=dtype)
    cdef real[:, ::1] cols = out
    if out.size == 0:
        return out
    with nogil:
        for c in range(chans):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    for n in range(n_img):
                        col = n * plane
                        for p in range(oh):
                            src = &x[n, c, p * stride + i, j]
                            dst = &cols[row, col]
                            for q in range(ow):
                                dst[q] = src[q * stride]
                            col += ow
    return out


def col2im(real[:, ::1] cols, int n_img, int chans, int h, int w,
           int k, int stride, int oh, int ow):
    cdef Py_ssize_t c, i, j, n, p, q, row, col
    cdef Py_ssize_t plane = oh * ow
    cdef real* src
    cdef real* dst
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_img, chans, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] img = out
    if out.size == 0 or cols.shape[1] == 0:
        return out
    with nogil:
        for c in range(chans):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    for n in range(n_img):
                        col = n * plane
                        for p in range(oh):
                            src = &cols[row, col]
                            dst = &img[n, c, p * stride + i, j]
                            for q in range(ow):
                                dst[q * stride] += src[q]
                            col += ow
    return out


def leaky_relu(real[::1] x, double slope):
    cdef Py_ssize_t i, size = x.shape[0]
    cdef real s = <real>slope
    dtype = np.float32 if real is float else np.float64
    out = np.empty(size, dtype=dtype)
    cdef real[::1] y = out
    with nogil:
        for i in range(size):
            y[i] = x[i] if x[i] > 0 else x[i] * s
    return out


def leaky_relu_backward(real[::1] dout, real[::1] out, double slope):
    cdef Py_ssize_t i, size = dout.shape[0]
    cdef real s = <real>slope
    dtype = np.float32 if real is float else np.float64
    res = np.empty(size, dtype=dtype)
    cdef real[::1] dx = res
    with nogil:
        for i in range(size):
            dx[i] = dout[i] if out[i] > 0 else dout[i] * s
    return res


def adam_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v, double b1, double b2,
                double keep, double scale, double bc2, double eps, bint adaptive):
    # each operation rounds to ``real`` exactly like the numpy expression sequence
    cdef Py_ssize_t i, size = p.shape[0]
    cdef real fb1 = <real>b1, fa1 = <real>(1 - b1), fb2 = <real>b2, fa2 = <real>(1 - b2)
    cdef real fkeep = <real>keep, fscale = <real>scale, fbc2 = <real>bc2, feps = <real>eps
    cdef real t, num
    cdef bint decay = keep != 1.0
    with nogil:
        for i in range(size):
            m[i] = m[i] * fb1
            t = fa1 * g[i]
            m[i] = m[i] + t
            v[i] = v[i] * fb2
            t = g[i] * g[i]
            t = fa2 * t
            v[i] = v[i] + t
            if decay:
                p[i] = p[i] * fkeep
            num = fscale * m[i]
            if adaptive:
                t = v[i] / fbc2
                if real is float:
                    t = sqrtf(t)
                else:
                    t = sqrt(t)
                t = t + feps
                num = num / t
            p[i] = p[i] - num
