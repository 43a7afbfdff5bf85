"""Timing comparison of the assignment-solver backends.

Runs solve_square with the compiled extension and the pure-Python
fallback on identical random cost matrices and prints a table of median
wall times. The two backends must agree bitwise; this script asserts
that on every instance it times.
"""

import argparse
import time

import numpy as np

from moeforge.assignment import HAVE_COMPILED, solve_square


def bench(n: int, repeats: int, rng: np.random.Generator) -> dict[str, float]:
    mats = [rng.random((n, n)) for _ in range(repeats)]
    out = {}
    backends = ["python"] + (["compiled"] if HAVE_COMPILED else [])
    results = {}
    for backend in backends:
        times = []
        sols = []
        for c in mats:
            t0 = time.perf_counter()
            sols.append(solve_square(c, backend=backend))
            times.append(time.perf_counter() - t0)
        out[backend] = float(np.median(times))
        results[backend] = sols
    if HAVE_COMPILED:
        for (pa, ca), (pb, cb) in zip(results["python"], results["compiled"]):
            assert np.array_equal(pa, pb) and ca == cb, "backends disagree"
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="16,32,64,128,256", help="comma-separated n")
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sizes = [int(s) for s in args.sizes.split(",")]
    rng = np.random.default_rng(args.seed)
    if not HAVE_COMPILED:
        print("compiled extension unavailable; timing the python backend only")
    header = f"{'n':>6}  {'python':>12}" + (f"  {'compiled':>12}  {'speedup':>8}" if HAVE_COMPILED else "")
    print(header)
    for n in sizes:
        r = bench(n, args.repeats, rng)
        line = f"{n:>6}  {r['python'] * 1e3:>10.3f}ms"
        if HAVE_COMPILED:
            line += f"  {r['compiled'] * 1e3:>10.3f}ms  {r['python'] / r['compiled']:>7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
