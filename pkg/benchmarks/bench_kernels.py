"""Compiled vs pure-Python kernels: wall time and bit-identity.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import sys
import timeit

import numpy as np

from v2nscale import _pykernels

try:
    from v2nscale import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    y = np.abs(500 + 300 * np.sin(np.arange(100_000) * 2 * np.pi / 288) + rng.normal(0, 20, 100_000))
    ring = rng.normal(0, 50, 864)
    n = 200_000
    arr = np.cumsum(rng.exponential(1 / 2.7, n))
    svc = rng.exponential(1.0, n)
    return {
        "tes replay (1e5 steps, s=864)": lambda k: k.smooth_replay(y, 500.0, 0.0, ring.copy(), 0.5, 0.001, 0.001, True, True),
        "des replay (1e5 steps)": lambda k: k.smooth_replay(y, 500.0, 0.0, np.empty(0), 0.5, 0.001, 0.001, False, True),
        "tes forecasts k=12 online (2e4)": lambda k: k.smooth_forecasts(
            y[:20_000], 500.0, 0.0, ring, 0.5, 0.001, 0.001, True, True, 12, True),
        "M/M/3 sojourns (2e5 arrivals)": lambda k: k.mmc_sojourn(arr, svc, 3),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}  identical")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat))
        print(f"{name:36s} {py:10.4f} {cy:10.4f} {py / cy:8.1f}x  {same(fn(_pykernels), fn(_kernels))}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
