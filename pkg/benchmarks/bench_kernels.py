"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from rgbtrack import _pykernels

try:
    from rgbtrack import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.normal(size=(4 * 4 * 320, 320))
    g = rng.normal(size=x.shape)
    h = rng.normal(size=(8192, 64))
    gamma, beta = rng.normal(size=64), rng.normal(size=64)
    img = rng.normal(size=(8, 16, 16, 64))
    scores = rng.normal(size=(8, 256))
    return {
        "softmax_fwd": lambda k: k.softmax_fwd(x),
        "softmax_bwd": lambda k: k.softmax_bwd(x, g),
        "layernorm_fwd": lambda k: k.layernorm_fwd(h, gamma, beta, 1e-5),
        "gelu_fwd": lambda k: k.gelu_fwd(h),
        "gelu_bwd": lambda k: k.gelu_bwd(h, h),
        "im2col3x3": lambda k: k.im2col3x3(img),
        "topk_sorted": lambda k: k.topk_sorted(scores, 180),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<15}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<15}{py:12.3f}{'n/a':>12}{'':>10}")
            continue
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<15}{py:12.3f}{cy:12.3f}{py / cy:10.2f}")


if __name__ == "__main__":
    main()
