"""End-to-end analysis of one summary dataset and its JSON/CSV outputs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core_stats import Estimate, conditional_f_report, gmm_estimate, ivw_estimate
from .robust import (
    ConfidenceSetResult,
    ThetaGrid,
    distortion_cutoff,
    evaluate_statistics,
    invert_confidence_set,
    mixture_draws,
    solve_a,
    solve_kappa2,
)
from .summary_data import MultivariableSummary

SCHEMA_VERSION = 1
METHOD_ALIASES = {
    "wald": "wald",
    "aw": "andrews_wald",
    "andrews_wald": "andrews_wald",
    "ar": "ar",
    "kleibergen": "kleibergen",
    "k": "kleibergen",
    "lc": "lc_robust",
    "lc_robust": "lc_robust",
    "koh": "kleibergen_oh",
    "kleibergen_oh": "kleibergen_oh",
}
DEFAULT_METHODS = ("wald", "ar", "kleibergen", "lc", "koh")


def resolve_methods(names) -> list[str]:
    out = []
    for name in names:
        key = name.strip().lower()
        if key not in METHOD_ALIASES:
            raise ValueError(f"unknown method {name!r}; choose from {', '.join(sorted(METHOD_ALIASES))}")
        if METHOD_ALIASES[key] not in out:
            out.append(METHOD_ALIASES[key])
    return out


def auto_grid(est: Estimate, half_width: float = 10.0, points: int = 101) -> ThetaGrid:
    """Axes centred on the estimate spanning +/- ``half_width`` standard errors."""
    axes = []
    for t, se in zip(est.theta, est.se):
        w = half_width * (se if se > 0 and np.isfinite(se) else 1.0)
        axes.append(np.linspace(t - w, t + w, points))
    return ThetaGrid(tuple(axes))


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


@dataclass
class AnalysisReport:
    inputs: dict
    estimates: dict
    conditional_f: dict
    sets: dict
    distortion: dict
    kappa2: dict
    calibration: dict
    grid: dict
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return _clean({
            "schema_version": SCHEMA_VERSION,
            "inputs": self.inputs,
            "estimates": self.estimates,
            "conditional_f": self.conditional_f,
            "sets": self.sets,
            "distortion": self.distortion,
            "kappa2": self.kappa2,
            "calibration": self.calibration,
            "grid": self.grid,
            "warnings": self.warnings,
        })

    def to_json(self) -> str:
        return dumps(self.to_dict())


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _estimate_dict(est: Estimate) -> dict:
    return {
        "theta": est.theta, "se": est.se, "cov": est.cov,
        "criterion_value": est.criterion_value, "converged": est.converged,
    }


def _set_dict(res: ConfidenceSetResult, grid: ThetaGrid) -> dict:
    return {
        "critical_value": res.critical_value,
        "alpha": res.alpha,
        "level": 1.0 - res.alpha,
        "area": res.area,
        "empty": res.empty,
        "touches_boundary": res.touches_boundary,
        "possibly_unbounded": res.touches_boundary,
        "projected_intervals": res.projected_intervals(grid),
        "projection_note": "grid projection: per-exposure [min, max] over member points, not a marginal interval",
        "n_failed": res.n_failed,
        "unreliable": res.unreliable,
        "a": res.a,
    }


def run_analysis(
    s: MultivariableSummary,
    methods=DEFAULT_METHODS,
    grid: ThetaGrid | None = None,
    alpha_level: float = 0.05,
    gamma_min: float = 0.05,
    seed: int = 0,
    draws: int = 100_000,
    n_jobs: int = 1,
    inputs: dict | None = None,
    exposure_names=None,
) -> tuple[AnalysisReport, dict[str, ConfidenceSetResult], ThetaGrid]:
    """Estimates, conditional F, requested sets and the distortion cutoff.

    Returns the report, the set results keyed by method (always including
    ``andrews_wald``, the non-robust set used for the distortion cutoff) and
    the grid they were inverted on.
    """
    methods = resolve_methods(methods)
    notes: list[str] = []
    ivw = ivw_estimate(s)
    gmm = gmm_estimate(s)
    if not gmm.converged:
        notes.append("GMM optimizer did not report convergence; best iterate used")
    cf = conditional_f_report(s)
    if grid is None:
        grid = auto_grid(gmm)
    if grid.K != s.K:
        raise ValueError(f"grid has {grid.K} axes but there are {s.K} exposures")

    store = mixture_draws(s.J, s.K, draws, seed)
    cal = solve_a(gamma_min, s.J, s.K, alpha_level, store)
    cut = distortion_cutoff(grid, s, alpha_level, gamma_min, draws=draws, seed=seed, n_jobs=n_jobs)
    results: dict[str, ConfidenceSetResult] = {"andrews_wald": cut.cs_n}
    for m in methods:
        if m == "andrews_wald":
            continue
        if m == "lc_robust":
            results[m] = cut.cs_r
            continue
        results[m] = invert_confidence_set(m, grid, s, alpha_level, cal=cal, estimate=gmm, n_jobs=n_jobs)

    for m, res in results.items():
        if res.touches_boundary:
            notes.append(f"{m} set reaches the grid edge and may be unbounded")
        if res.unreliable:
            notes.append(f"{m} set unreliable: {res.n_failed} grid points failed to evaluate")
        if m == "ar" and res.empty:
            notes.append("Anderson-Rubin set is empty: possible excessive heterogeneity")
    if cut.gamma_hat is None:
        notes.append(f"distortion cutoff undetermined up to {cut.gamma_cap}")

    k2 = solve_kappa2(gmm.theta, s)
    names = list(exposure_names) if exposure_names else [f"exposure{k + 1}" for k in range(s.K)]
    base_inputs = {"J": s.J, "K": s.K, "n_X": s.n_X, "n_Y": s.n_Y, "c": s.c, "exposures": names}
    base_inputs.update(inputs or {})
    report = AnalysisReport(
        inputs=base_inputs,
        estimates={"ivw": _estimate_dict(ivw), "gmm": _estimate_dict(gmm)},
        conditional_f={"f_stats": cf.f_stats, "min_f": cf.min_f, "delta_at_min": cf.delta_at_min},
        sets={m: _set_dict(r, grid) for m, r in results.items()},
        distortion={
            "gamma_hat": cut.gamma_hat, "determined": cut.determined, "gamma_min": gamma_min,
            "gamma_cap": cut.gamma_cap, "cs_n_method": "andrews_wald",
        },
        kappa2={"theta": gmm.theta, "kappa2": k2.kappa2, "at_boundary": k2.at_boundary},
        calibration={
            "seed": seed, "draws": draws, "a": cal.a, "quantile": cal.quantile,
            "gamma_min": gamma_min, "at_boundary": cal.at_boundary,
        },
        grid={"axes": [[float(a[0]), float(a[-1]), int(a.size)] for a in grid.axes], "points": grid.size},
        warnings=notes,
    )
    return report, results, grid


def sets_csv(grid: ThetaGrid, results: dict[str, ConfidenceSetResult]) -> str:
    """Plot-ready membership table, one row per grid point in enumeration order."""
    K = grid.K
    header = [f"theta_{k + 1}" for k in range(K)] + [f"member_{m}" for m in results]
    lines = [",".join(header)]
    pts = grid.points
    masks = [results[m].member for m in results]
    for i in range(grid.size):
        cells = [repr(float(v)) for v in pts[i]] + ["1" if mk[i] else "0" for mk in masks]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def statistics_at(theta, s: MultivariableSummary) -> dict:
    """All statistics at one point (convenience for reports and demos)."""
    vals = evaluate_statistics(np.asarray(theta, dtype=float), s, ("ar", "kleibergen", "andrews_wald", "kleibergen_oh"))
    return {k: (bool(v) if k == "failed" else float(v)) for k, v in vals.items()}
