"""Benchmark the hot kernels: numba JIT path vs the pure-numpy fallback.

Runs every kernel from quadot._kernels.IMPLEMENTATIONS on random dense
instances of the requested sizes and reports the best-of-N wall time per
implementation plus the speedup.  Results go to stdout as a table and,
with --out, to a JSON file.

Example:
    python benchmarks/benchmark_kernels.py --sizes 200,400,800 --out bench.json
"""

import argparse
import json
import sys
import time

import numpy as np

from quadot._kernels import IMPLEMENTATIONS


def build_inputs(n, m, epsilon, rng):
    """One random dense instance shaped like a real solve sees it."""
    X = rng.random((n, 1))
    Y = rng.random((m, 1))
    C = 0.5 * (X - Y.T) ** 2
    p = np.full(n, 1.0 / n)
    q = np.full(m, 1.0 / m)
    f = rng.normal(0.0, 0.1, n)
    g = rng.normal(0.0, 0.1, m)
    # plausible slack rows and integrand weights for the sweep kernel
    xi_pop = f[:, None] + g[None, :] - C
    k = max(2, m // 2)
    xi_emp = np.ascontiguousarray(xi_pop[:, :k] + rng.normal(0.0, 0.01, (n, k)))
    inc_pop = q.copy()
    inc_emp = np.full(k, -1.0 / k)
    return {
        "row_update_cold": (C, g, q, epsilon),
        "row_update_warm": (C, g, q, epsilon, f.copy()),
        "hinge_stats": (C, f, g, p, q),
        "hinge_sq_stats": (C, f, g, p, q),
        "hinge_weighted_sum": (C, f, g, p, q),
        "vc_sweep_max": (xi_pop, inc_pop, xi_emp, inc_emp),
    }


def best_time(fn, args, repeats):
    fn(*args)  # warm the JIT cache / page in the inputs
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="200,400,800",
                        help="comma-separated square instance sizes")
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions; the minimum is reported")
    parser.add_argument("--epsilon", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", help="write results as JSON to this path")
    args = parser.parse_args(argv)

    sizes = [int(s) for s in args.sizes.split(",") if s]
    names = list(IMPLEMENTATIONS)
    if "numba" not in names:
        print("note: numba unavailable or disabled; timing the numpy path only",
              file=sys.stderr)

    rng = np.random.default_rng(args.seed)
    rows = []
    header = f"{'kernel':<20} {'n':>6} " + "".join(f"{name + ' (s)':>14}" for name in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        inputs = build_inputs(n, n, args.epsilon, rng)
        for kernel, call_args in inputs.items():
            timings = {
                name: best_time(IMPLEMENTATIONS[name][kernel], call_args, args.repeats)
                for name in names
            }
            row = {"kernel": kernel, "n": n, **{f"{k}_seconds": v for k, v in timings.items()}}
            line = f"{kernel:<20} {n:>6} " + "".join(f"{timings[k]:>14.6f}" for k in names)
            if "numpy" in timings and "numba" in timings and timings["numba"] > 0:
                row["speedup"] = timings["numpy"] / timings["numba"]
                line += f"{row['speedup']:>10.2f}"
            rows.append(row)
            print(line)

    if args.out:
        payload = {
            "format_version": 1,
            "implementations": names,
            "epsilon": args.epsilon,
            "seed": args.seed,
            "repeats": args.repeats,
            "results": rows,
        }
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
