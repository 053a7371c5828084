import math

import numpy as np


def leaky_relu_gain(slope=0.2):
    return math.sqrt(2.0 / (1.0 + slope ** 2))


def orthogonal_(shape, gain=1.0, rng=None, dtype=np.float32):
    """Orthogonal matrix of ``shape`` flattened to ``(shape[0], prod(shape[1:]))``.

    The rows (or columns, whichever dimension is smaller) are orthonormal and
    scaled by ``gain``. Sign-corrected QR of a Gaussian matrix, as in Saxe et al.
    """
    if rng is None:
        rng = np.random.default_rng()
    rows = shape[0]
    cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    if gain == 0:
        return np.zeros(shape, dtype=dtype)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q).reshape(shape).astype(dtype)
