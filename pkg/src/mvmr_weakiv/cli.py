"""Command-line entry point: ``mvmr-weakiv analyze`` and ``mvmr-weakiv simulate``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core_stats import NumericalError
from .report import DEFAULT_METHODS, resolve_methods, run_analysis, sets_csv
from .robust import ThetaGrid
from .simulation import (
    SimulationConfig,
    default_grid,
    run_replicates,
    run_study,
    screening_experiment,
    selection_experiment,
    write_csv,
)
from .summary_data import SummaryDataError, build_multivariable_summary, harmonize_variants, load_gwas_tables

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3
DESIGN_DEFAULTS = {
    "baseline": {"mu": "10", "xi": "1", "tau": ""},
    "screening": {"mu": "6.5", "xi": "1", "tau": ""},
    "selection": {"mu": "5", "xi": "1", "tau": "0.5,1"},
}

log = logging.getLogger("mvmr_weakiv")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("MVMR_THREADS", "").strip()
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ValueError(f"MVMR_THREADS must be an integer, got {env!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvmr-weakiv",
        description="Weak-instrument-robust multivariable Mendelian randomization from summary data.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyse summary statistics")
    a.add_argument("--exposures", required=True, help="exposure TSV (variant, alleles, beta_<name>, se_<name>)")
    a.add_argument("--outcome", required=True, help="outcome TSV (variant, alleles, beta, se)")
    a.add_argument("--ld", required=True, help="J x J LD correlation TSV")
    a.add_argument("--exposure-cor", required=True, help="K x K exposure correlation TSV")
    a.add_argument("--nx", type=float, required=True, help="exposure GWAS sample size")
    a.add_argument("--ny", type=float, required=True, help="outcome GWAS sample size")
    a.add_argument("--alpha", type=float, default=0.05, help="test level (default 0.05)")
    a.add_argument("--gamma-min", type=float, default=0.05, help="smallest coverage distortion (default 0.05)")
    a.add_argument("--grid", default=None, help='"lo:hi:step[,lo:hi:step...]", default GMM estimate +/- 10 SE')
    a.add_argument("--methods", default=",".join(DEFAULT_METHODS), help="comma list of confidence sets")
    a.add_argument("--seed", type=int, default=0, help="seed for simulated critical values")
    a.add_argument("--draws", type=int, default=100_000, help="number of simulated critical-value draws")
    a.add_argument("--out", default=None, help="report JSON path (default stdout)")
    a.add_argument("--sets-out", default=None, help="confidence-set membership CSV path")
    a.add_argument("--threads", type=int, default=None, help="worker threads (fallback MVMR_THREADS)")
    a.add_argument("--allow-ambiguous", action="store_true", help="keep strand-ambiguous variants, with a warning")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    s.add_argument("--design", required=True, choices=sorted(DESIGN_DEFAULTS))
    s.add_argument("--mu", default=None, help="comma list of instrument strengths")
    s.add_argument("--xi", default=None, help="comma list of exposure-asymmetry values")
    s.add_argument("--tau", default=None, help="comma list of extra-instrument strengths")
    s.add_argument("--kappa2", type=float, default=0.0, help="variance of direct pleiotropic effects (times n_Y)")
    s.add_argument("--reps", type=int, default=100, help="replicates per cell")
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--gamma-min", type=float, default=0.01, help="smallest coverage distortion (default 0.01)")
    s.add_argument("--draws", type=int, default=100_000, help="number of simulated critical-value draws")
    s.add_argument("--grid", default=None, help='"lo:hi:step,lo:hi:step" (default -2:2:0.04 per axis)')
    s.add_argument("--no-grid", action="store_true", help="skip grid inversion (coverage and size only)")
    s.add_argument("--threshold", type=float, default=10.0, help="screening threshold on min conditional F")
    s.add_argument("--out", default=None, help="metrics CSV path (default stdout)")
    s.add_argument("--per-replicate", default=None, help="also write per-replicate rows to this CSV")
    s.add_argument("--threads", type=int, default=None, help="worker processes (fallback MVMR_THREADS)")
    s.set_defaults(func=cmd_simulate)
    return parser


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_analyze(args) -> int:
    n_jobs = _threads(args.threads)
    methods = resolve_methods(args.methods.split(","))
    grid = ThetaGrid.parse(args.grid) if args.grid else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        tables = load_gwas_tables(args.exposures, args.outcome, args.ld, args.exposure_cor, args.nx, args.ny)
        tables = harmonize_variants(tables, allow_ambiguous=args.allow_ambiguous)
        s = build_multivariable_summary(tables)
        log.info("loaded J=%d variants, K=%d exposures", s.J, s.K)
        inputs = {
            "files": {
                "exposures": str(args.exposures), "outcome": str(args.outcome),
                "ld": str(args.ld), "exposure_cor": str(args.exposure_cor),
            },
            "variants": list(tables.variants),
            "alpha": args.alpha,
            "sigma_gamma_convention": "outcome covariance scaled by n_X, so it embeds c = n_X / n_Y",
        }
        report, results, grid = run_analysis(
            s, methods, grid, args.alpha, args.gamma_min, args.seed, args.draws, n_jobs,
            inputs=inputs, exposure_names=tables.exposure_names,
        )
    report.warnings = [str(w.message) for w in caught] + report.warnings
    _emit(report.to_json(), args.out)
    if args.sets_out:
        Path(args.sets_out).write_text(sets_csv(grid, results))
    for note in report.warnings:
        log.warning(note)
    return EXIT_OK


def cmd_simulate(args) -> int:
    n_jobs = _threads(args.threads)
    d = DESIGN_DEFAULTS[args.design]
    mus = _floats(args.mu if args.mu is not None else d["mu"])
    xis = _floats(args.xi if args.xi is not None else d["xi"])
    taus = _floats(args.tau if args.tau is not None else d["tau"])
    if args.reps < 1:
        raise ValueError("--reps must be positive")
    grid = None if args.no_grid else (ThetaGrid.parse(args.grid) if args.grid else default_grid())
    base = SimulationConfig(
        mu=mus[0], xi=xis[0], tau=taus[0] if taus and args.design != "selection" else None,
        kappa2=args.kappa2, grid=grid, gamma_min=args.gamma_min, replicates=args.reps,
        master_seed=args.seed, draws=args.draws,
    )
    per_rep = None
    if args.design == "baseline":
        if len(taus) > 1:
            raise ValueError("baseline design takes a single --tau")
        out = run_study(base, mus, xis, per_replicate=args.per_replicate is not None, n_jobs=n_jobs,
                        distortion=grid is not None)
        metrics, per_rep = out if args.per_replicate is not None else (out, None)
    elif args.design == "screening":
        metrics, per_rep = [], []
        for mu in mus:
            for xi in xis:
                cell = replace(base, mu=mu, xi=xi)
                rows = run_replicates(cell, distortion=False, n_jobs=n_jobs)
                metrics += screening_experiment(cell, args.threshold, rows=rows)
                per_rep += [{"mu": mu, "xi": xi, **r} for r in rows]
    else:
        if grid is None:
            raise ValueError("the selection design needs a grid")
        metrics = selection_experiment(base, taus, mus, n_jobs=n_jobs)
    _emit(write_csv(metrics), args.out)
    if args.per_replicate is not None and per_rep is not None:
        write_csv(per_rep, args.per_replicate)
    return EXIT_OK


def _join_grid_values(argv: list[str]) -> list[str]:
    """Attach ``--grid`` values so that ranges starting with '-' are not read as options."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--grid" and i + 1 < len(argv):
            out.append(f"--grid={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_grid_values(list(sys.argv[1:] if argv is None else argv)))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (SummaryDataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
