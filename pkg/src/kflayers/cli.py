"""Command line entry point: ``kflayers {train, grid-eval, bench-scan, verify}``.

Run outputs go under ``$KFLAYERS_OUTPUT_ROOT`` (default ``./runs``) unless
``--output-dir`` is given.  Exit status is 0 only when every requested
artifact was written.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import AGENT_VARIANTS, ExperimentConfig, dump_config, load_config, parse_override
from .errors import CheckpointError, ConfigError, NumericError

OUTPUT_ROOT_ENV = "KFLAYERS_OUTPUT_ROOT"
GRID_COLUMNS = ("mu_b", "sigma_b", "agent_seed", "win_rate", "mean_length", "n_episodes")
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("kflayers")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


# -- train -------------------------------------------------------------------------------

def resolve_train_config(args) -> ExperimentConfig:
    overrides = dict(parse_override(item) for item in args.set or [])
    if args.variant:
        overrides["run.variant"] = args.variant
    if args.rho is not None:
        overrides["env.rho"] = str(args.rho)
    if args.precision:
        overrides["run.precision"] = args.precision
    if args.steps is not None:
        overrides["run.total_steps"] = str(args.steps)
    if args.seed:
        overrides["run.seeds"] = ",".join(str(s) for s in args.seed)
    if args.output_dir:
        overrides["run.output_dir"] = args.output_dir
    return load_config(args.config, overrides)


def _run_dir(cfg: ExperimentConfig) -> Path:
    if cfg.run.output_dir:
        return Path(cfg.run.output_dir)
    return output_root() / f"{cfg.run.variant}-rho{cfg.env.rho:g}"


def _train_one(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    from .agent import train

    try:
        res = train(cfg, seed, out / f"seed{seed}", log=log.info)
    except NumericError as exc:
        return {"seed": seed, "status": "failed", "error": str(exc)}
    fin = res.final
    return {"seed": seed, "status": "ok",
            "return_train_dist": fin["train_dist"]["eval_return_mean"],
            "return_ood": fin["ood"]["eval_return_mean"],
            "win_rate_train_dist": fin["train_dist"]["win_rate"],
            "win_rate_ood": fin["ood"]["win_rate"],
            "mean_length_train_dist": fin["train_dist"]["eval_len_mean"],
            "mean_length_ood": fin["ood"]["eval_len_mean"],
            "updates": res.updates, "seconds": res.seconds}


def _prepare_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    out = _run_dir(cfg)
    _prepare_dir(out, args.force)
    (out / "config.ini").write_text(dump_config(cfg))
    seeds = list(cfg.run.seeds)
    if args.parallel_seeds > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_seeds) as pool:
            runs = list(pool.map(_train_one, [cfg] * len(seeds), seeds, [out] * len(seeds)))
    else:
        runs = [_train_one(cfg, s, out) for s in seeds]
    ok = [r for r in runs if r["status"] == "ok"]
    summary = {"version": __version__, "config_sha256": cfg.sha256(), "variant": cfg.run.variant,
               "rho": cfg.env.rho, "runs": runs}
    for key in ("return_train_dist", "return_ood", "win_rate_train_dist", "mean_length_train_dist"):
        if ok:
            summary[f"mean_{key}"] = float(np.mean([r[key] for r in ok]))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, sort_keys=True))
    return EXIT_OK if len(ok) == len(runs) else EXIT_NUMERIC


# -- grid-eval ---------------------------------------------------------------------------

def find_checkpoints(ckpt_dir: Path, seeds) -> dict[int, Path]:
    found = {s: ckpt_dir / f"seed{s}" / "checkpoint.npz" for s in seeds}
    missing = [s for s, p in found.items() if not p.is_file()]
    if missing:
        raise CheckpointError(f"missing checkpoints in {ckpt_dir} for seeds {missing}")
    return found


def aggregate_grid(rows: list[dict]) -> list[dict]:
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["mu_b"], r["sigma_b"]), []).append(r)
    out = []
    for (mu, sg), group in cells.items():
        n = sum(g["n_episodes"] for g in group)
        out.append({"mu_b": mu, "sigma_b": sg, "agent_seed": "all",
                    "win_rate": float(np.mean([g["win_rate"] for g in group])),
                    "mean_length": float(np.mean([g["mean_length"] for g in group])),
                    "n_episodes": n})
    return out


def _write_rows_atomic(rows, path: Path, columns) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    os.replace(tmp, path)


def run_grid_eval(ckpt_dir, seeds, grid_size: int = 25, episodes: int = 100, eval_seed: int = 0):
    from .agent import load_agent
    from .envs import BestArmConfig, default_grid, grid_evaluate

    ckpts = find_checkpoints(Path(ckpt_dir), seeds)
    agents = {s: load_agent(p) for s, p in ckpts.items()}
    env_cfg = getattr(next(iter(agents.values())), "env_config", None) or BestArmConfig()
    mus, sigmas = default_grid(grid_size, env_cfg)
    per_agent = grid_evaluate(agents, mus, sigmas, episodes, env_cfg, seed=eval_seed)
    return per_agent, aggregate_grid(per_agent)


def cmd_grid_eval(args) -> int:
    seeds = _int_list(args.seeds)
    per_agent, agg = run_grid_eval(args.checkpoint_dir, seeds, args.grid_size, args.episodes, args.eval_seed)
    out = Path(args.out) if args.out else Path(args.checkpoint_dir) / "grid.csv"
    _write_rows_atomic(per_agent, out.with_name(out.stem + "_per_agent.csv"), GRID_COLUMNS)
    _write_rows_atomic(agg, out, GRID_COLUMNS)
    print(f"wrote {len(agg)} cells to {out}")
    return EXIT_OK


# -- bench-scan --------------------------------------------------------------------------

def cmd_bench_scan(args) -> int:
    from .bench import bench_scan, loglog_slope, write_csv

    rows = bench_scan(_int_list(args.lengths), args.channels, args.repeats, args.backend)
    out = Path(args.out) if args.out else output_root() / "bench_scan.csv"
    write_csv(rows, out)
    exact = all(r["combines"] == r["analytic_combines"] for r in rows)
    print(f"wrote {out}; sequential log-log slope {loglog_slope(rows, 'sequential'):.3f}; "
          f"parallel slope {loglog_slope(rows, 'parallel'):.3f}; combine counts exact: {exact}")
    return EXIT_OK


# -- verify ------------------------------------------------------------------------------

def cmd_verify(args) -> int:
    tests = Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print(f"test suite not found at {tests}", file=sys.stderr)
        return EXIT_MISSING
    cmd = [sys.executable, "-m", "pytest", str(tests), *args.pytest_args]
    return subprocess.call(cmd)


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kflayers", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent per seed")
    t.add_argument("--config", help="INI config file")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
    t.add_argument("--seed", type=int, action="append", help="seed (repeatable; default from config)")
    t.add_argument("--variant", choices=AGENT_VARIANTS)
    t.add_argument("--rho", type=float, help="observation cost")
    t.add_argument("--precision", choices=("f32", "f64"))
    t.add_argument("--steps", type=int, help="environment steps per seed")
    t.add_argument("--output-dir", help=f"run directory (default under ${OUTPUT_ROOT_ENV})")
    t.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    t.add_argument("--parallel-seeds", type=int, default=1, metavar="N",
                   help="train seeds in N worker processes")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("grid-eval", help="win rate and episode length over a (mu, sigma) grid")
    g.add_argument("checkpoint_dir")
    g.add_argument("--seeds", default="0..4", help="e.g. 0..4 or 0,2,3")
    g.add_argument("--grid-size", type=int, default=25)
    g.add_argument("--episodes", type=int, default=100)
    g.add_argument("--eval-seed", type=int, default=0)
    g.add_argument("--out", help="aggregated CSV path (default <checkpoint_dir>/grid.csv)")
    g.set_defaults(func=cmd_grid_eval)

    b = sub.add_parser("bench-scan", help="time sequential vs parallel filtering")
    b.add_argument("--lengths", default="64,128,256,512,1024,2048,4096,8192")
    b.add_argument("--channels", type=int, default=64)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--backend", choices=("numba", "numpy"))
    b.add_argument("--out", help="CSV path")
    b.set_defaults(func=cmd_bench_scan)

    v = sub.add_parser("verify", help="run the property and acceptance test suite")
    v.add_argument("pytest_args", nargs=argparse.REMAINDER)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
