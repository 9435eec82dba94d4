"""Monte Carlo study of two-sample multivariable MR under weak instruments.

Data are generated at the individual level from a linear IV model with two
exposures, reduced to univariable regression summaries in two independent
samples, and passed through the same summary-data pipeline as real inputs.
Each replicate draws from its own stream keyed by ``(master_seed, index)``,
so results do not depend on execution order or parallelism.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .core_stats import NumericalError, conditional_f_report, gmm_estimate, ivw_estimate, wald_stat
from .robust import (
    ThetaGrid,
    _pick,
    evaluate_statistics,
    mixture_draws,
    scan_distortion,
    solve_a,
)
from .summary_data import MultivariableSummary, UnivariableGwasTables, build_multivariable_summary

__all__ = [
    "DEFAULT_ERROR_COV",
    "NOMINAL_ERROR_COV",
    "nearest_correlation",
    "SimulationConfig",
    "SimulatedData",
    "true_gamma",
    "simulate_dataset",
    "evaluate_replicate",
    "run_replicates",
    "run_study",
    "screening_experiment",
    "selection_experiment",
    "write_csv",
]

NOMINAL_ERROR_COV = np.array([[1.0, -0.6, 0.6], [-0.6, 1.0, 0.3], [0.6, 0.3, 1.0]])


def nearest_correlation(M: np.ndarray, floor: float = 0.01) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and rescale back to a unit diagonal."""
    lam, U = np.linalg.eigh(M)
    C = (U * np.maximum(lam, floor)) @ U.T
    d = np.sqrt(np.diag(C))
    return C / np.outer(d, d)


# (U, V1, V2) correlation; the nominal matrix has a negative eigenvalue (-0.0117)
DEFAULT_ERROR_COV = nearest_correlation(NOMINAL_ERROR_COV)
ESTIMATORS = ("ivw", "gmm")
SET_METHODS = ("wald", "andrews_wald", "ar", "kleibergen", "lc_robust", "kleibergen_oh")
DEFAULT_METHODS = ("ivw", "gmm", "wald", "andrews_wald", "ar", "kleibergen", "lc_robust")


def default_grid() -> ThetaGrid:
    return ThetaGrid.from_ranges([(-2.0, 2.0, 0.04), (-2.0, 2.0, 0.04)])


@dataclass
class SimulationConfig:
    """Design of one simulation cell.

    ``tau`` switches on four extra instruments whose effects are ``tau``
    times the core effects (J = 8). ``kappa2`` adds random direct effects
    with variance ``kappa2 / n_Y`` on the outcome. ``grid=None`` skips grid
    inversion (coverage and power are then read off the statistics at the
    true and null values only).
    """

    n_X: int = 5000
    n_Y: int = 5000
    J: int = 4
    K: int = 2
    theta0: tuple = (1.0, 0.0)
    mu: float = 10.0
    xi: float = 1.0
    tau: float | None = None
    kappa2: float = 0.0
    error_cov: np.ndarray = field(default_factory=lambda: DEFAULT_ERROR_COV.copy())
    grid: ThetaGrid | None = field(default_factory=default_grid)
    alpha_level: float = 0.05
    gamma_min: float = 0.01
    replicates: int = 100
    master_seed: int = 0
    draws: int = 100_000

    def __post_init__(self):
        if self.K != 2 or self.J != 4:
            raise ValueError("the simulation design has J = 4 core instruments and K = 2 exposures")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        cov = np.asarray(self.error_cov, dtype=float)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov)[0] <= 0:
            raise ValueError("error_cov must be a symmetric positive definite 3 x 3 matrix")
        self.error_cov = cov

    @property
    def n_instruments(self) -> int:
        return self.J if self.tau is None else 2 * self.J


@dataclass
class SimulatedData:
    tables: UnivariableGwasTables
    summary: MultivariableSummary
    truth: np.ndarray
    gamma: np.ndarray


def true_gamma(config: SimulationConfig) -> np.ndarray:
    """True instrument-exposure effects, (J_total, 2)."""
    xi, scale = config.xi, config.mu / math.sqrt(config.n_X)
    g1 = np.array([1 + xi, 1 + xi, 1 - xi, 1 - xi]) * 0.2 * scale
    g2 = np.array([1 - xi, 1 - xi, 1 + xi, 1 + xi]) * scale
    gamma = np.column_stack([g1, g2])
    if config.tau is not None:
        gamma = np.vstack([gamma, config.tau * gamma])
    return gamma


def _univariable(Z: np.ndarray, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-variant simple regressions (with intercept) of each column of T on each column of Z."""
    n = Z.shape[0]
    Zc = Z - Z.mean(axis=0)
    Tc = T - T.mean(axis=0)
    sxx = np.einsum("ij,ij->j", Zc, Zc)
    sxy = Zc.T @ Tc
    syy = np.einsum("ij,ij->j", Tc, Tc)
    beta = sxy / sxx[:, None]
    rss = syy[None, :] - beta**2 * sxx[:, None]
    se = np.sqrt(rss / (n - 2) / sxx[:, None])
    return beta, se


def simulate_dataset(config: SimulationConfig, replicate: int) -> SimulatedData:
    """Draw both samples for one replicate and build its summary data."""
    rng = np.random.default_rng([config.master_seed, replicate])
    J = config.n_instruments
    gamma = true_gamma(config)
    theta0 = np.asarray(config.theta0, dtype=float)

    a = rng.uniform(0.0, math.sqrt(0.4), size=J)
    z_cov = np.outer(a, a)
    np.fill_diagonal(z_cov, 1.0)
    z_chol = np.linalg.cholesky(z_cov)
    e_chol = np.linalg.cholesky(config.error_cov)
    nu = rng.normal(0.0, math.sqrt(config.kappa2 / config.n_Y), size=J) if config.kappa2 > 0 else np.zeros(J)

    def draw(n):
        Z = rng.standard_normal((n, J)) @ z_chol.T
        E = rng.standard_normal((n, 3)) @ e_chol.T
        X = Z @ gamma + E[:, 1:]
        Y = X @ theta0 + E[:, 0] + Z @ nu
        return Z, X, Y

    Zx, Xx, _ = draw(config.n_X)
    Zy, _, Yy = draw(config.n_Y)
    bx, sx = _univariable(Zx, Xx)
    by, sy = _univariable(Zy, Yy[:, None])

    tables = UnivariableGwasTables(
        variants=[f"v{j + 1}" for j in range(J)],
        effect_allele=["A"] * J,
        other_allele=["G"] * J,
        exposure_beta=bx,
        exposure_se=sx,
        outcome_beta=by[:, 0],
        outcome_se=sy[:, 0],
        ld=np.corrcoef(Zx, rowvar=False),
        exposure_cor=np.corrcoef(Xx, rowvar=False),
        n_X=config.n_X,
        n_Y=config.n_Y,
    )
    return SimulatedData(tables, build_multivariable_summary(tables), theta0, gamma)


# ---------------------------------------------------------------------------
# per-replicate evaluation


def evaluate_replicate(
    s: MultivariableSummary,
    truth: np.ndarray,
    config: SimulationConfig,
    methods=DEFAULT_METHODS,
    distortion: bool = True,
) -> dict:
    """Coverage, power, area and strength measures for one summary dataset.

    Coverage means the set (or, for ivw/gmm, the interval for exposure 1)
    contains ``truth``; power means it excludes the zero vector.
    """
    alpha = config.alpha_level
    K = s.K
    grid = config.grid
    extra = np.vstack([truth, np.zeros(K)])
    pts = extra if grid is None else np.vstack([grid.points, extra])
    n_grid = 0 if grid is None else grid.size
    chi_k = stats.chi2.ppf(1 - alpha, K)
    z = stats.norm.ppf(1 - alpha / 2)
    row: dict = {}

    try:
        cf = conditional_f_report(s)
        row["min_f"] = cf.min_f
        for k, f in enumerate(cf.f_stats):
            row[f"f_{k + 1}"] = float(f)
    except (ArithmeticError, np.linalg.LinAlgError):
        row["min_f"] = math.nan

    for name, fit in (("ivw", ivw_estimate), ("gmm", gmm_estimate)):
        if name not in methods and not (name == "gmm" and "wald" in methods):
            continue
        try:
            est = fit(s)
        except (ArithmeticError, np.linalg.LinAlgError):
            row[f"{name}_failed"] = True
            continue
        if name == "gmm":
            gmm = est
        for k in range(K):
            row[f"{name}_theta_{k + 1}"] = float(est.theta[k])
        if name in methods:
            half = z * est.se[0]
            row[f"{name}_cover"] = bool(abs(est.theta[0] - truth[0]) <= half)
            row[f"{name}_power"] = bool(abs(est.theta[0]) > half)

    wanted = [m for m in ("ar", "kleibergen", "andrews_wald", "kleibergen_oh") if m in methods]
    if "lc_robust" in methods or distortion:
        wanted += [m for m in ("ar", "kleibergen", "andrews_wald") if m not in wanted]
    vals = evaluate_statistics(pts, s, wanted)
    store = mixture_draws(s.J, K, config.draws, config.master_seed)
    cal = solve_a(config.gamma_min, s.J, K, alpha, store)
    values: dict[str, tuple[np.ndarray, float]] = {}
    for m in ("ar", "kleibergen", "andrews_wald", "kleibergen_oh"):
        if m in vals:
            values[m] = (vals[m], stats.chi2.ppf(1 - alpha, s.J) if m == "ar" else chi_k)
    if "ar" in vals and "kleibergen" in vals:
        values["lc_robust"] = (vals["kleibergen"] + cal.a * vals["ar"], cal.quantile)
    if "wald" in methods and "gmm_theta_1" in row:
        values["wald"] = (wald_stat(pts, gmm, s.n_X), chi_k)

    for m in methods:
        if m in ESTIMATORS or m not in values:
            continue
        v, crit = values[m]
        ok = np.isfinite(v)
        member = ok & (v <= crit)
        row[f"{m}_cover"] = bool(member[n_grid])
        row[f"{m}_power"] = bool(ok[n_grid + 1] and not member[n_grid + 1])
        if grid is not None:
            row[f"{m}_area"] = int(member[:n_grid].sum())
            row[f"{m}_failed_points"] = int((~ok[:n_grid]).sum())

    if distortion and grid is not None:
        cs_n = values["andrews_wald"][0][:n_grid] <= chi_k
        g_hat = scan_distortion(
            vals["kleibergen"][:n_grid], vals["ar"][:n_grid], cs_n, store, alpha, config.gamma_min
        )
        row["gamma_hat"] = math.nan if g_hat is None else g_hat
    return row


def _replicate_task(args) -> dict:
    config, index, methods, distortion = args
    data = simulate_dataset(config, index)
    row = {"replicate": index}
    try:
        row.update(evaluate_replicate(data.summary, data.truth, config, methods, distortion))
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        row["error"] = str(exc)
    return row


def run_replicates(config: SimulationConfig, methods=DEFAULT_METHODS, distortion=True, n_jobs: int = 1) -> list[dict]:
    """Evaluate ``config.replicates`` replicates, returned in index order."""
    tasks = [(config, i, tuple(methods), distortion) for i in range(config.replicates)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(_replicate_task, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))
    return [_replicate_task(t) for t in tasks]


# ---------------------------------------------------------------------------
# aggregation


def _mean(rows, key) -> float:
    vals = [float(r[key]) for r in rows if key in r and r[key] is not None and np.isfinite(float(r[key]))]
    return float(np.mean(vals)) if vals else math.nan


def _rate(rows, key) -> tuple[float, float, int]:
    vals = [bool(r[key]) for r in rows if key in r]
    n = len(vals)
    if n == 0:
        return math.nan, math.nan, 0
    p = sum(vals) / n
    return p, math.sqrt(p * (1 - p) / n), n


def summarize(rows: list[dict], config: SimulationConfig, methods, extra: dict | None = None) -> list[dict]:
    """One metrics row per method from per-replicate rows."""
    out = []
    theta0 = np.asarray(config.theta0, dtype=float)
    for m in methods:
        cov, cov_se, n = _rate(rows, f"{m}_cover")
        power, _, _ = _rate(rows, f"{m}_power")
        rec = dict(extra or {})
        rec.update(
            method=m, replicates=len(rows), evaluated=n, coverage=cov, coverage_se=cov_se, power=power,
            mean_area=_mean(rows, f"{m}_area"), mean_min_f=_mean(rows, "min_f"),
            mean_gamma_hat=_mean(rows, "gamma_hat"),
        )
        if m in ESTIMATORS:
            for k in range(len(theta0)):
                est = [r[f"{m}_theta_{k + 1}"] for r in rows if f"{m}_theta_{k + 1}" in r]
                rec[f"mean_bias_{k + 1}"] = float(np.mean(est) - theta0[k]) if est else math.nan
                rec[f"median_bias_{k + 1}"] = float(np.median(est) - theta0[k]) if est else math.nan
        rec["errors"] = sum(1 for r in rows if "error" in r)
        out.append(rec)
    return out


def run_study(
    config: SimulationConfig,
    mu_list,
    xi_list,
    methods=DEFAULT_METHODS,
    per_replicate: bool = False,
    n_jobs: int = 1,
    distortion: bool = True,
):
    """Metrics over a grid of (mu, xi) cells.

    Returns the metrics rows, plus the per-replicate rows when
    ``per_replicate`` is set.
    """
    metrics, reps = [], []
    for mu in mu_list:
        for xi in xi_list:
            cell = replace(config, mu=float(mu), xi=float(xi))
            rows = run_replicates(cell, methods, distortion, n_jobs)
            metrics += summarize(rows, cell, methods, {"mu": float(mu), "xi": float(xi)})
            if per_replicate:
                reps += [{"mu": float(mu), "xi": float(xi), **r} for r in rows]
    return (metrics, reps) if per_replicate else metrics


def screening_experiment(
    config: SimulationConfig, threshold: float = 10.0, methods=DEFAULT_METHODS, n_jobs: int = 1, rows=None
) -> list[dict]:
    """Coverage over all replicates versus replicates with min conditional F >= threshold."""
    if rows is None:
        rows = run_replicates(config, methods, distortion=False, n_jobs=n_jobs)
    kept = [r for r in rows if np.isfinite(r.get("min_f", math.nan)) and r["min_f"] >= threshold]
    if not kept:
        warnings.warn("no replicate passed the screening threshold", stacklevel=2)
    out = []
    for m in methods:
        cov_all, se_all, n_all = _rate(rows, f"{m}_cover")
        cov_kept, se_kept, n_kept = _rate(kept, f"{m}_cover")
        out.append({
            "mu": config.mu, "xi": config.xi, "method": m, "threshold": threshold,
            "coverage_all": cov_all, "coverage_all_se": se_all, "n_all": n_all,
            "coverage_screened": cov_kept, "coverage_screened_se": se_kept, "n_screened": n_kept,
            "screened_fraction": len(kept) / len(rows) if rows else math.nan,
            "mean_min_f": _mean(rows, "min_f"),
        })
    return out


# ---------------------------------------------------------------------------
# instrument selection


POLICIES = ("core", "full", "select_condf", "select_gamma")


def _selection_task(args) -> dict:
    config, index = args
    data = simulate_dataset(config, index)
    grid = config.grid
    alpha = config.alpha_level
    chi_k = stats.chi2.ppf(1 - alpha, 2)
    pts = np.vstack([grid.points, data.truth])
    per_set = {}
    for name, idx in (("core", list(range(config.J))), ("full", list(range(config.n_instruments)))):
        try:
            s = build_multivariable_summary(data.tables.subset(idx))
            min_f = conditional_f_report(s).min_f
            vals = evaluate_statistics(pts, s, ("ar", "kleibergen", "andrews_wald"))
            store = mixture_draws(s.J, s.K, config.draws, config.master_seed)
            cal = solve_a(config.gamma_min, s.J, s.K, alpha, store)
            lc = vals["kleibergen"] + cal.a * vals["ar"]
            member = np.isfinite(lc) & (lc <= cal.quantile)
            g_hat = scan_distortion(
                vals["kleibergen"][:-1], vals["ar"][:-1], vals["andrews_wald"][:-1] <= chi_k,
                store, alpha, config.gamma_min,
            )
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            return {"replicate": index, "error": str(exc)}
        per_set[name] = {
            "size": len(idx), "min_f": min_f, "gamma_hat": math.inf if g_hat is None else g_hat,
            "cover": bool(member[-1]), "area": int(member[:-1].sum()),
        }
    names = ["core", "full"]
    pick_f = names[_pick([(-per_set[n]["min_f"], per_set[n]["size"], i) for i, n in enumerate(names)])]
    pick_g = names[_pick([(per_set[n]["gamma_hat"], per_set[n]["size"], i) for i, n in enumerate(names)])]
    row = {"replicate": index}
    for policy, choice in (("core", "core"), ("full", "full"), ("select_condf", pick_f), ("select_gamma", pick_g)):
        row[f"{policy}_cover"] = per_set[choice]["cover"]
        row[f"{policy}_area"] = per_set[choice]["area"]
        row[f"{policy}_full"] = choice == "full"
    return row


def selection_experiment(config: SimulationConfig, tau_list, mu_list=(5.0,), n_jobs: int = 1) -> list[dict]:
    """Coverage and area of LC robust sets for core, full and post-selection policies."""
    out = []
    for mu in mu_list:
        for tau in tau_list:
            cell = replace(config, mu=float(mu), tau=float(tau))
            tasks = [(cell, i) for i in range(cell.replicates)]
            if n_jobs > 1:
                with ProcessPoolExecutor(max_workers=n_jobs) as pool:
                    rows = list(pool.map(_selection_task, tasks))
            else:
                rows = [_selection_task(t) for t in tasks]
            for policy in POLICIES:
                cov, cov_se, n = _rate(rows, f"{policy}_cover")
                sel, _, _ = _rate(rows, f"{policy}_full")
                out.append({
                    "mu": float(mu), "tau": float(tau), "policy": policy, "replicates": len(rows), "evaluated": n,
                    "coverage": cov, "coverage_se": cov_se, "mean_area": _mean(rows, f"{policy}_area"),
                    "full_selected_rate": sel, "errors": sum(1 for r in rows if "error" in r),
                })
    return out


# ---------------------------------------------------------------------------
# output


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return "nan" if not np.isfinite(value) and np.isnan(value) else repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "" if value is None else str(value)


def write_csv(rows: list[dict], path=None) -> str:
    """Serialize rows with a fixed column order (first-seen) and exact float repr."""
    columns: list[str] = []
    for r in rows:
        for key in r:
            if key not in columns:
                columns.append(key)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
