import numpy as np


def numerical_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    """max |a - n| / max(|a| + |n|, floor) over a vector-wide scale.

    Uses the tensor-wide magnitude as denominator so entries that are
    legitimately near zero do not blow up the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)
