"""Time the compiled and numpy kernel backends on MNIST-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 32]

Prints one row per kernel with the median time of each backend and the
speedup.  Outputs of the two backends are compared before timing.
"""

import argparse
import sys
import timeit

import numpy as np

from cnnevo.kernels import BACKENDS


def cases(batch, rng):
    x = rng.normal(size=(batch, 6, 28, 28))
    k, s, ho, wo = 5, 1, 24, 24
    cols = rng.normal(size=(batch, 6 * k * k, ho * wo))
    pool_in = rng.normal(size=(batch, 6, 24, 24))
    dout = rng.normal(size=(batch, 6, 12, 12))
    arg = rng.integers(0, 4, size=(batch, 6, 12, 12)).astype(np.int32)
    a = rng.integers(-2000, 2000, size=(batch * 144, 150)).astype(np.int32)
    bt = rng.integers(-2000, 2000, size=(12, 150)).astype(np.int32)
    return {
        "im2col 6x28x28 k5": ("im2col", (x, k, s, ho, wo)),
        "col2im 6x28x28 k5": ("col2im", (cols, 6, 28, 28, k, s, ho, wo)),
        "maxpool_forward 2x2": ("maxpool_forward", (pool_in, 2, 2)),
        "maxpool_backward 2x2": ("maxpool_backward", (dout, arg, 24, 24, 2, 2)),
        "fx_matmul Q7.8": ("fx_matmul", (a, bt, 8, -32768, 32767)),
    }


def same(x, y):
    if isinstance(x, tuple):
        return all(same(a, b) for a, b in zip(x, y))
    return np.allclose(np.asarray(x), np.asarray(y), rtol=1e-6, atol=1e-6)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=32)
    args = parser.parse_args(argv)
    if "cython" not in BACKENDS:
        print("compiled backend not built; run: python3 setup.py build_ext --inplace", file=sys.stderr)
        return 1
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    print(f"{'kernel':<24}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for label, (name, inputs) in cases(args.batch, np.random.default_rng(0)).items():
        f_py, f_cy = getattr(py, name), getattr(cy, name)
        if not same(f_py(*inputs), f_cy(*inputs)):
            print(f"{label}: backends disagree", file=sys.stderr)
            return 1
        t_py = np.median(timeit.repeat(lambda: f_py(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_cy = np.median(timeit.repeat(lambda: f_cy(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<24}{t_py:>10.2f}{t_cy:>11.2f}{t_py / t_cy:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
