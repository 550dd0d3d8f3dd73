"""Compare the numba and pure-numpy kernel backends.

Times the forward filter (sequential and tree scan) and the adjoint sweep at
several sequence lengths and prints a table plus the numba speed-up.

    python3 benchmarks/bench_backends.py --lengths 64,256,1024 --channels 2048
"""
from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from kflayers import kernels
from kflayers.bench import random_instance


def best_of(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(lengths, channels: int, repeats: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for K in lengths:
        args = random_instance(K, channels, rng)
        X, P = kernels.kf_forward(*args, parallel=False, backend="numpy")
        gX, gP = rng.normal(size=(2, K, channels))
        a, b, q, u, w, r, mask, x0, p0 = args
        ops = {
            "forward-sequential": lambda be: kernels.kf_forward(*args, parallel=False, backend=be),
            "forward-parallel": lambda be: kernels.kf_forward(*args, parallel=True, backend=be),
            "backward": lambda be: kernels.kf_backward(a, b, q, u, w, r, mask, X, P, gX, gP, x0, p0,
                                                       backend=be),
        }
        for name, op in ops.items():
            t = {be: best_of(lambda: op(be), repeats) for be in kernels.available_backends()}
            rows.append({"length": K, "op": name, "channels": channels,
                         "numpy_s": t.get("numpy"), "numba_s": t.get("numba"),
                         "speedup": t["numpy"] / t["numba"] if "numba" in t else float("nan")})
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lengths", default="16,64,256,1024")
    p.add_argument("--channels", type=int, default=2048)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", help="optional CSV path")
    args = p.parse_args(argv)
    rows = run([int(k) for k in args.lengths.split(",")], args.channels, args.repeats)
    print(f"{'length':>7} {'op':<20} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for r in rows:
        print(f"{r['length']:>7} {r['op']:<20} {1e3 * r['numpy_s']:>10.3f} "
              f"{1e3 * r['numba_s']:>10.3f} {r['speedup']:>9.2f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
