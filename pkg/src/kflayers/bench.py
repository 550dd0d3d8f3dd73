"""Wall-time and combine-count measurements for the sequential and tree filters."""
from __future__ import annotations

import csv
import timeit
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractError
from .scan import affine_operator, scan_parallel, scan_sequential, tree_combine_count

BENCH_COLUMNS = ("length", "path", "backend", "channels", "seconds", "combines", "analytic_combines")


def random_instance(K: int, C: int, rng: np.random.Generator, dtype=np.float64):
    a = rng.uniform(0.5, 1.0, C).astype(dtype)
    b = rng.normal(size=C).astype(dtype)
    q = rng.uniform(0.1, 1.0, (K, C)).astype(dtype)
    u = rng.normal(size=(K, C)).astype(dtype)
    w = rng.normal(size=(K, C)).astype(dtype)
    r = rng.uniform(0.1, 2.0, (K, C)).astype(dtype)
    mask = np.zeros((K, C), bool)
    return a, b, q, u, w, r, mask, np.zeros(C, dtype), np.ones(C, dtype)


def count_combines(K: int, parallel: bool) -> int:
    """Run the generic scan on ``K`` affine elements and count combine evaluations."""
    stats: dict = {}
    elems = (np.ones(K), np.zeros(K))
    (scan_parallel if parallel else scan_sequential)(affine_operator(), elems, stats)
    return stats.get("combines", 0)


def _time(fn, repeats: int) -> float:
    """Per-call seconds: best of ``repeats`` batches, each long enough (>= 0.2 s) to average out timer noise."""
    fn()  # warm-up (and JIT compilation)
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    # the minimum is the least load-sensitive estimate of the cost
    return min(timer.repeat(repeat=repeats, number=number)) / number


def bench_scan(lengths, channels: int = 64, repeats: int = 5, backend: str | None = None,
               seed: int = 0) -> list[dict]:
    """Best-of-``repeats`` mean wall time per filter pass for both paths at each length."""
    lengths = [int(k) for k in lengths]
    if not lengths or min(lengths) < 1:
        raise ContractError("lengths must be >= 1")
    if repeats < 1 or channels < 1:
        raise ContractError("repeats and channels must be >= 1")
    backend = backend or kernels.default_backend_name()
    rng = np.random.default_rng(seed)
    rows = []
    for K in lengths:
        args = random_instance(K, channels, rng)
        for path, parallel in (("sequential", False), ("parallel", True)):
            sec = _time(lambda: kernels.kf_forward(*args, parallel=parallel, backend=backend), repeats)
            rows.append({"length": K, "path": path, "backend": backend, "channels": channels,
                         "seconds": sec, "combines": count_combines(K, parallel),
                         "analytic_combines": tree_combine_count(K) if parallel else max(K - 1, 0)})
    return rows


def loglog_slope(rows, path: str = "sequential") -> float:
    """Least-squares slope of log(seconds) against log(length)."""
    sel = [r for r in rows if r["path"] == path]
    x = np.log([r["length"] for r in sel])
    y = np.log([r["seconds"] for r in sel])
    return float(np.polyfit(x, y, 1)[0])


def write_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
