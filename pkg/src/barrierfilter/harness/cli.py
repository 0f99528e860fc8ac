"""Command-line entry point: ``barrierfilter <subcommand> [options]``.

Exit codes: 0 success, 2 usage error, 3 unreadable or malformed config
(or input CSV), 4 invalid values / contract violation, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .. import __version__
from .. import rng as rngmod
from ..exceptions import BarrierFilterError, ContractViolation
from ..metrics import fit_gamma
from . import config as configmod
from .experiments import (
    run_dimension_sweep,
    run_nmse_experiment,
    run_tv_decay_experiment,
    trial_truth,
)

log = logging.getLogger("barrierfilter")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3, 4, 5
SCHEMA_VERSION = 1
CSV_SCHEMAS = {
    "states.csv": "trial,n,x_0..x_{d_x-1}",
    "observations.csv": "trial,n,y_0..y_{d_y-1}",
    "tv_curve.csv": "n,tv_mean,tv_stderr",
    "nmse.csv": "n,nmse_<filter>...",
    "dim_sweep.csv": "d_x,filter,nmse_mean,nmse_stderr",
}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_manifest(out: Path, command: str, cfg: configmod.RunConfig | None,
                    durations: dict[str, float], extra: dict[str, Any] | None = None) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "command": command,
        "seed": cfg.seed if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "git_describe": _git_describe(),
        "durations_s": durations,
        "csv_schemas": CSV_SCHEMAS,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load(args: argparse.Namespace) -> configmod.RunConfig:
    cfg = configmod.load(args.config)
    changes: dict[str, Any] = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.trials is not None:
        changes["n_trials"] = args.trials
    return cfg.replace(**changes) if changes else cfg


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.arms()[0]
    start = time.perf_counter()
    state_rows, obs_rows, h_rows = [], [], []
    for trial in range(cfg.n_trials):
        truth = trial_truth(base, trial)
        for n, x in enumerate(truth.states):
            state_rows.append([trial, n, *map(_fmt, x)])
        for n, y in enumerate(truth.observations, start=1):
            obs_rows.append([trial, n, *map(_fmt, y)])
        for i, row in enumerate(truth.H):
            h_rows.append([trial, i, *map(_fmt, row)])
    m = cfg.model
    _write_csv(out / "states.csv", ["trial", "n", *(f"x_{i}" for i in range(m.d_x))], state_rows)
    _write_csv(out / "observations.csv", ["trial", "n", *(f"y_{j}" for j in range(m.d_y))], obs_rows)
    _write_csv(out / "H.csv", ["trial", "row", *(f"h_{j}" for j in range(m.d_y))], h_rows)
    _write_manifest(out, "simulate", cfg, {"total": time.perf_counter() - start})
    return EXIT_OK


def cmd_tv_decay(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = run_tv_decay_experiment(cfg.arms()[0], threads=args.threads,
                                     floor_quantile=args.floor_quantile)
    curve = result.curve
    _write_csv(
        out / "tv_curve.csv",
        ["n", "tv_mean", "tv_stderr"],
        [[n, _fmt(v), _fmt(s)] for n, (v, s) in enumerate(zip(curve.values, curve.stderr))],
    )
    fit = result.fit
    fit_doc = {"gamma_hat": fit.gamma_hat if fit else None,
               "d0": fit.d0 if fit else float(curve.values[0]),
               "n_cut": fit.n_cut if fit else None,
               "n_runs": curve.n_runs}
    (out / "fit.json").write_text(json.dumps(fit_doc, indent=2, sort_keys=True) + "\n")
    durations = {"total": time.perf_counter() - start,
                 "trials": [t.duration for t in result.trials]}
    _write_manifest(out, "tv-decay", cfg, durations)
    if fit:
        print(f"gamma_hat={fit.gamma_hat:.6f} (fitted on n<={fit.n_cut})")
    else:
        print("gamma_hat unavailable: curve does not decay above its floor")
    return EXIT_OK


def cmd_nmse(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    table = run_nmse_experiment(cfg.arms(), threads=args.threads)
    T = cfg.T_obs
    rows = [[n, *(_fmt(table.mean[l][n - 1]) for l in table.labels)] for n in range(1, T + 1)]
    _write_csv(out / "nmse.csv", ["n", *(f"nmse_{l}" for l in table.labels)], rows)
    _write_manifest(out, "nmse", cfg, {"total": time.perf_counter() - start},
                    {"truth_digests": table.truth_digests[table.labels[0]]})
    for label in table.labels:
        print(f"{label}: time-mean NMSE {table.time_mean(label):.4f}")
    return EXIT_OK


def cmd_dim_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if cfg.sweep is None:
        raise ContractViolation("dim-sweep needs a [sweep] table in the config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rows = run_dimension_sweep(cfg.arms(), cfg.sweep.dims, cfg.sweep.scale_N, threads=args.threads)
    _write_csv(out / "dim_sweep.csv", ["d_x", "filter", "nmse_mean", "nmse_stderr"],
               [[r.d_x, r.filter, _fmt(r.nmse_mean), _fmt(r.nmse_stderr)] for r in rows])
    _write_manifest(out, "dim-sweep", cfg, {"total": time.perf_counter() - start})
    for r in rows:
        print(f"d_x={r.d_x:4d} {r.filter:>16s}: NMSE {r.nmse_mean:.4f} +- {r.nmse_stderr:.4f}")
    return EXIT_OK


def _read_tv_csv(path: str) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise configmod.ConfigError(f"cannot read {path}: {exc}") from exc
    if not rows or "tv_mean" not in rows[0]:
        raise configmod.ConfigError(f"{path} lacks a tv_mean column")
    try:
        return np.array([float(r["tv_mean"]) for r in rows])
    except ValueError as exc:
        raise configmod.ConfigError(f"{path}: {exc}") from exc


def cmd_fit_gamma(args: argparse.Namespace) -> int:
    values = _read_tv_csv(args.input)
    fit = fit_gamma(values, d0=args.d0, floor_quantile=args.floor_quantile)
    print(f"{fit.gamma_hat:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"gamma_hat": fit.gamma_hat, "d0": fit.d0, "n_cut": fit.n_cut}
        (out / "fit.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="barrierfilter", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name: str, fn, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--trials", type=int, help="override n_trials")
        p.add_argument("--threads", type=int, default=1, help="trials run concurrently")
        p.set_defaults(func=fn)
        return p

    experiment("simulate", cmd_simulate, "generate ground truth and observations")
    tv = experiment("tv-decay", cmd_tv_decay, "twin-filter TV decay and gamma fit")
    tv.add_argument("--floor-quantile", type=float, default=0.5)
    experiment("nmse", cmd_nmse, "NMSE curves for several filters")
    experiment("dim-sweep", cmd_dim_sweep, "time-mean NMSE versus state dimension")

    fg = sub.add_parser("fit-gamma", help="fit the decay rate of a TV curve CSV")
    fg.add_argument("--in", dest="input", required=True, help="CSV with a tv_mean column")
    fg.add_argument("--d0", type=float, help="initial distance; fitted jointly when omitted")
    fg.add_argument("--floor-quantile", type=float, default=0.5)
    fg.add_argument("--out", help="optional directory for fit.json")
    fg.set_defaults(func=cmd_fit_gamma)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except configmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BarrierFilterError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
