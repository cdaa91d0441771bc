"""Compiled vs. pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel: best-of-N wall time for each backend and the speedup.
"""

import argparse
import timeit

import numpy as np

from idclab import _fallback

try:
    from idclab import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def cases():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(48, 96, 3), dtype=np.uint8)
    kern = np.array([0.05, 0.25, 0.4, 0.25, 0.05])
    x = rng.normal(size=(16, 64, 128))
    gain, bias = np.ones(128), np.zeros(128)
    codes = rng.integers(0, 20, size=(150, 12))
    lens = rng.integers(1, 13, size=150)
    a, b = list(codes[0]), list(codes[1])
    xhat_inv = _fallback.layer_norm_forward(x, gain, bias, 1e-5)[1:]
    return {
        "resize_bilinear 96x48->64x64": lambda m: m.resize_bilinear(img, 64, 64),
        "blur_separable 48x96 r=2": lambda m: m.blur_separable(img, kern),
        "gelu_forward 16x64x128": lambda m: m.gelu_forward(x),
        "layer_norm_forward 16x64x128": lambda m: m.layer_norm_forward(x, gain, bias, 1e-5),
        "layer_norm_backward 16x64x128": lambda m: m.layer_norm_backward(x, *xhat_inv, gain),
        "lcs_length 12x12": lambda m: m.lcs_length(a, b),
        "lcs_pairwise 150 strings": lambda m: m.lcs_pairwise(codes, lens),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    print(f"{'kernel':<32}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases().items():
        times = []
        for mod in (_fallback, _kernels):
            t = timeit.Timer(lambda: fn(mod))
            n, _ = t.autorange()
            times.append(min(t.repeat(args.repeat, n)) / n * 1e3)
        print(f"{name:<32}{times[0]:>12.3f}{times[1]:>14.3f}{times[0] / times[1]:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
