"""Timing comparison of the two mask-enumeration kernels.

Sweeps all 2^n masks of a single softmax head with both the compiled
gray-code kernel and the pure-numpy fallback, printing per-width timings,
the speedup, and the largest output disagreement.  The pure kernel is
always importable; the compiled one is skipped when the extension was
not built.

Usage: python3 benchmarks/bench_oracle.py [--min-n 10] [--max-n 22]
"""

import argparse
import time

import numpy as np

from dropscale import _kernels_py
from dropscale.oracle import mask_count_weights
from dropscale.tensor import RngStream

try:
    from dropscale import _kernels as compiled
except ImportError:
    compiled = None


def head_case(n, k, seed):
    rng = RngStream(seed)
    return (rng.derive("w").normals((k, n)),
            rng.derive("b").normals(k),
            rng.derive("z").normals(n))


def run(kernel, w, b, z, weights, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        start = time.perf_counter()
        out = kernel.head_expectation_affine(w, b, z, 1.0, weights,
                                             "softmax", True)
        best = min(best, time.perf_counter() - start)
    return best, out


def main():
    parser = argparse.ArgumentParser(
        description="time the exhaustive 2^n mask sweep on both kernels")
    parser.add_argument("--min-n", type=int, default=10)
    parser.add_argument("--max-n", type=int, default=22,
                        help="largest gated width (the enumeration cap)")
    parser.add_argument("--classes", type=int, default=10)
    parser.add_argument("--repeats", type=int, default=3,
                        help="best-of timing repeats per width")
    args = parser.parse_args()

    if compiled is None:
        print("compiled kernel not available; timing the pure kernel only")
    print(f"{'n':>3} {'masks':>9} {'pure (s)':>10} {'compiled (s)':>13} "
          f"{'speedup':>8} {'max |diff|':>11}")
    for n in range(args.min_n, args.max_n + 1, 2):
        w, b, z = head_case(n, args.classes, seed=n)
        weights = mask_count_weights(n, 0.5)
        repeats = args.repeats if n <= 18 else 1
        t_pure, out_pure = run(_kernels_py, w, b, z, weights, repeats)
        if compiled is None:
            print(f"{n:>3} {1 << n:>9} {t_pure:>10.4f} {'-':>13} {'-':>8} "
                  f"{'-':>11}")
            continue
        t_comp, out_comp = run(compiled, w, b, z, weights, repeats)
        diff = max(np.abs(out_pure[0] - out_comp[0]).max(),
                   np.abs(out_pure[1] - out_comp[1]).max())
        print(f"{n:>3} {1 << n:>9} {t_pure:>10.4f} {t_comp:>13.4f} "
              f"{t_pure / t_comp:>8.1f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
