"""Timing comparison of the compiled and pure-numpy kernel backends.

Runs the three hot loops (grouped fake-quantization, grouped min/max range
scans, integer code matmul) on transformer-sized tensors and prints a table
of per-call times plus the speedup. Outputs are also cross-checked so a
backend can never win by computing something different.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--rows R] [--cols C]
"""

import argparse
import time

import numpy as np

from hessq import kernels


def time_call(fn, *args, repeats):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7, help="timed repeats per case (best taken)")
    ap.add_argument("--rows", type=int, default=768, help="weight matrix rows")
    ap.add_argument("--cols", type=int, default=768, help="weight matrix cols")
    ap.add_argument("--groups", type=int, default=128, help="row groups for the grouped kernels")
    args = ap.parse_args()

    names = kernels.available_backends()
    if len(names) < 2:
        print(f"only {names} available; build the extension to compare backends")
    backends = {n: kernels.get_backend(n) for n in names}

    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.rows, args.cols)).astype(np.float32)
    starts = np.linspace(0, args.rows, args.groups + 1).astype(np.int64)
    lo = np.full(args.groups, -2.5)
    hi = np.full(args.groups, 2.5)
    a_codes = rng.integers(0, 2**8, size=(args.rows, args.cols)).astype(np.uint16)
    b_codes = rng.integers(0, 2**8, size=(args.cols, args.rows)).astype(np.uint16)

    cases = [
        ("fake_quant_grouped", lambda b: b.fake_quant_grouped(x, starts, lo, hi, 2**3)),
        ("minmax_grouped", lambda b: b.minmax_grouped(x, starts)),
        ("integer_matmul", lambda b: b.integer_matmul(a_codes, b_codes)),
    ]

    print(f"rows={args.rows} cols={args.cols} groups={args.groups} repeats={args.repeats}")
    print(f"{'kernel':<20}" + "".join(f"{n:>14}" for n in names) + f"{'speedup':>10}")
    for label, call in cases:
        outs = {}
        times = {}
        for n, mod in backends.items():
            times[n] = time_call(call, mod, repeats=args.repeats)
            outs[n] = call(mod)
        if len(names) == 2:
            ref, other = (outs[n] for n in names)
            ref = ref if isinstance(ref, tuple) else (ref,)
            other = other if isinstance(other, tuple) else (other,)
            for r, o in zip(ref, other):
                np.testing.assert_array_equal(r, o)
            speedup = f"{times[names[0]] / times[names[1]]:>9.2f}x"
        else:
            speedup = f"{'n/a':>10}"
        row = "".join(f"{times[n] * 1e3:>12.3f}ms" for n in names)
        print(f"{label:<20}{row}{speedup}")


if __name__ == "__main__":
    main()
