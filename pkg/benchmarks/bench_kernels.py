"""Time the compiled kernels against the numpy fallback.

Usage: ``python benchmarks/bench_kernels.py [--points N] [--repeat R]``
"""

import argparse
import timeit

import numpy as np

from phonocav import _kernels_py
from phonocav.lineshapes import K_B

try:
    from phonocav import _ckernels
except ImportError:
    _ckernels = None


def _cases(n):
    E = np.linspace(1.925, 1.955, n)
    theta = np.array([1.9478, 1.94827, 1500, 1500, 2.05e-4, 2.05e-4, 4e5, 4e5, 1.2e-3, 1.2e-3,
                      K_B * 4.0, 1.945, 300.0, 2.3e-3, 2.0, 2.0, 20.0])
    rng = np.random.default_rng(0)
    signal = rng.random(10 * n)
    kernel = rng.random(121)
    return {
        "lorentzian": lambda m: m.lorentzian(E, 1.94, 2.3e-3, 1.0),
        "psb": lambda m: m.psb(E, 1.9478, 4e5, 1.2e-3, K_B * 4.0),
        "coupled": lambda m: m.coupled(E, theta),
        "convolve_valid": lambda m: m.convolve_valid(signal, kernel),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=751, help="energy grid size")
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)

    backends = [("python", _kernels_py)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled extension not available; timing the numpy fallback only")
    print(f"{'kernel':<16}" + "".join(f"{name:>14}" for name, _ in backends) + f"{'speedup':>10}")
    for name, fn in _cases(args.points).items():
        times = []
        for _, mod in backends:
            fn(mod)  # warm up
            t = min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3)) / args.repeat
            times.append(t)
        row = f"{name:<16}" + "".join(f"{t * 1e6:>11.1f} us" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
