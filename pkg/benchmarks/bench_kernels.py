"""Compare the compiled and numpy kernels on the model's layer and parameter sizes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--batch B]
"""

import argparse
import timeit

import numpy as np

from twincount.nncore import kernels

# (channels, padded size, kernel, stride, output size) for the encoder convs and
# the col2im side of the decoder's transposed convs, full-width model
SHAPES = {
    "enc1 1x132 k5 s2": (1, 132, 5, 2, 64),
    "enc2 32x68 k5 s2": (32, 68, 5, 2, 32),
    "enc3 64x36 k5 s2": (64, 36, 5, 2, 16),
    "dec4 16x67 k2 s1": (16, 67, 2, 1, 66),
    "dec5 16x133 k6 s2": (16, 133, 6, 2, 64),
}

# flattened activation sizes (batch 16) and parameter counts for the elementwise kernels
ELEMENTWISE = {
    "act 16x32x64x64": 16 * 32 * 64 * 64,
    "act 16x128x16x16": 16 * 128 * 16 * 16,
}
PARAMS = {
    "fc 4096x1024": 4096 * 1024,
    "conv 128x64x5x5": 128 * 64 * 5 * 5,
}


def bench(backend, fn_name, args, repeat):
    fn = getattr(backend, fn_name)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()
    backends = {"python": kernels.get_backend("python")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<8} {'shape':<20} " + " ".join(f"{b:>10}" for b in backends) + "   speedup")
    for label, (c, size, k, s, o) in SHAPES.items():
        x = rng.standard_normal((args.batch, c, size, size)).astype(np.float32)
        cols = kernels.get_backend("python").im2col(x, k, s, o, o)
        cases = {
            "im2col": (x, k, s, o, o),
            "col2im": (np.ascontiguousarray(cols), args.batch, c, size, size, k, s, o, o),
        }
        for fn_name, fn_args in cases.items():
            times = {name: bench(b, fn_name, fn_args, args.repeat) for name, b in backends.items()}
            row = " ".join(f"{t * 1e3:>8.2f}ms" for t in times.values())
            speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{fn_name:<8} {label:<20} {row}   {speedup:6.2f}x")
    for label, size in ELEMENTWISE.items():
        x = rng.standard_normal(size).astype(np.float32)
        out = kernels.get_backend("python").leaky_relu(x, 0.2)
        report(backends, "lrelu", label, (x, 0.2), args.repeat)
        report(backends, "lrelu_bw", label, (x, out, 0.2), args.repeat, fn_name="leaky_relu_backward")
    for label, size in PARAMS.items():
        p, g = rng.standard_normal((2, size)).astype(np.float32)
        m, v = np.zeros(size, np.float32), np.ones(size, np.float32)
        report(backends, "adam", label, (p, g, m, v, 0.9, 0.999, 1.0, 1e-3, 0.5, 1e-8, True),
               args.repeat, fn_name="adam_update")


def report(backends, tag, label, fn_args, repeat, fn_name=None):
    times = {name: bench(b, fn_name or "leaky_relu", fn_args, repeat) for name, b in backends.items()}
    row = " ".join(f"{t * 1e3:>8.2f}ms" for t in times.values())
    speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
    print(f"{tag:<8} {label:<20} {row}   {speedup:6.2f}x")


if __name__ == "__main__":
    main()
