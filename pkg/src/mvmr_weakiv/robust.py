"""Weak-instrument-robust statistics, calibration and grid test inversion.

Statistics are evaluated in batches over (P, K) arrays of candidate
effect vectors. Points where a statistic cannot be computed come back as
NaN and are reported, never silently dropped.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .core_stats import (
    Estimate,
    NumericalError,
    _omega_batch,
    _points,
    _unwrap,
    conditional_f_report,
    gmm_estimate,
    moment_function,
    wald_stat,
)
from .summary_data import MultivariableSummary

__all__ = [
    "METHODS",
    "ThetaGrid",
    "ConfidenceSetResult",
    "LcCalibration",
    "OverdispersionFit",
    "MixtureDraws",
    "DistortionCutoff",
    "SelectionResult",
    "ar_stat",
    "kleibergen_D",
    "kstar_stat",
    "andrews_wald_stat",
    "lc_stat",
    "crit_value",
    "solve_a",
    "mixture_draws",
    "solve_kappa2",
    "kleibergen_oh_stat",
    "evaluate_statistics",
    "invert_confidence_set",
    "distortion_cutoff",
    "select_instruments",
]

METHODS = ("wald", "andrews_wald", "ar", "kleibergen", "lc_robust", "cs_p", "kleibergen_oh")
RANK_COND_LIMIT = 1e12
UNRELIABLE_FAILURE_RATE = 1e-3
CHUNK_POINTS = 1024


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class ThetaGrid:
    """Cartesian grid of candidate effect vectors, first axis slowest."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size == 0 or np.any(np.diff(a) <= 0):
                raise ValueError("grid axes must be nonempty and strictly increasing")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def from_ranges(cls, ranges: Sequence[tuple[float, float, float]]) -> "ThetaGrid":
        axes = []
        for lo, hi, step in ranges:
            if step <= 0 or hi < lo:
                raise ValueError(f"bad grid range {lo}:{hi}:{step}")
            n = int(math.floor((hi - lo) / step + 1e-9)) + 1
            axes.append(np.round(lo + step * np.arange(n), 12))
        return cls(tuple(axes))

    @classmethod
    def parse(cls, spec: str) -> "ThetaGrid":
        """Parse ``"lo:hi:step[,lo:hi:step...]"``."""
        ranges = []
        for part in spec.split(","):
            bits = part.strip().split(":")
            if len(bits) != 3:
                raise ValueError(f"grid axis must be lo:hi:step, got {part!r}")
            ranges.append(tuple(float(b) for b in bits))
        return cls.from_ranges(ranges)

    @property
    def K(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @functools.cached_property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    @functools.cached_property
    def edge_mask(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.K, -1)
        edge = np.zeros(self.size, dtype=bool)
        for k, n in enumerate(self.shape):
            edge |= (idx[k] == 0) | (idx[k] == n - 1)
        return edge

    def nearest_index(self, theta) -> int:
        pos = [int(np.argmin(np.abs(a - t))) for a, t in zip(self.axes, np.asarray(theta, dtype=float))]
        return int(np.ravel_multi_index(pos, self.shape))


# ---------------------------------------------------------------------------
# batched statistic kernels


def _safe_solve(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched solve with per-item failure flags (b has a trailing RHS axis)."""
    out = np.full(b.shape, np.nan)
    ok = np.ones(A.shape[0], dtype=bool)
    try:
        out = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        for p in range(A.shape[0]):
            try:
                out[p] = np.linalg.solve(A[p], b[p])
            except np.linalg.LinAlgError:
                ok[p] = False
    ok &= np.all(np.isfinite(out.reshape(out.shape[0], -1)), axis=1)
    return out, ok


def _well_conditioned(A: np.ndarray) -> np.ndarray:
    lam = np.linalg.eigvalsh(A)
    return (lam[:, 0] > 0) & (lam[:, -1] <= RANK_COND_LIMIT * lam[:, 0])


def _score_terms(pts, s: MultivariableSummary, om):
    """Moments, weighted moments and the D-matrix terms shared by S, K*, LC."""
    g = moment_function(pts, s)
    sol, ok = _safe_solve(om, np.concatenate([g[..., None], s.gamma_hat[None].repeat(len(pts), 0)], axis=2))
    u, Oi_gamma = sol[..., 0], sol[..., 1:]
    D = s.gamma_hat[None] + np.einsum("pm,kmij,pj->pik", pts, s.blocks, u, optimize=True)
    OiD, ok_d = _safe_solve(om, D)
    return g, u, Oi_gamma, D, OiD, ok & ok_d


def _projection(M, OiM, u, n_X):
    """n_X * u'M (M' Omega^{-1} M)^{-1} M'u and the correction (M'Oi M)^{-1} M'u."""
    A = np.einsum("pjk,pjl->pkl", M, OiM)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    b = np.einsum("pjk,pj->pk", M, u)
    ok = _well_conditioned(A)
    step = np.full(b.shape, np.nan)
    if ok.any():
        sol, ok_s = _safe_solve(A[ok], b[ok][..., None])
        step[ok] = sol[..., 0]
        ok[np.flatnonzero(ok)[~ok_s]] = False
    value = n_X * np.einsum("pk,pk->p", b, step)
    return value, step, ok


def _kappa2_batch(g: np.ndarray, om0: np.ndarray, n_X: float, c: float, rtol: float = 1e-13):
    """Root of n_X g'(om0 + c k I)^{-1} g - J = 0 in k >= 0 for each point."""
    J = g.shape[1]
    lam, U = np.linalg.eigh(om0)
    w = n_X * np.einsum("pji,pj->pi", U, g) ** 2

    def f(k):
        return np.sum(w / (lam + c * k[:, None]), axis=1) - J

    zero = np.zeros(g.shape[0])
    f0 = f(zero)
    active = f0 > 0
    kappa = zero.copy()
    if active.any():
        wa, la = w[active], lam[active]

        def fa(k):
            return np.sum(wa / (la + c * k[:, None]), axis=1) - J

        lo = np.zeros(wa.shape[0])
        hi = np.sum(wa, axis=1) / (c * J)
        while np.any(fa(hi) > 0):
            hi = np.where(fa(hi) > 0, 2.0 * hi, hi)
        for _ in range(400):
            mid = 0.5 * (lo + hi)
            pos = fa(mid) > 0
            lo = np.where(pos, mid, lo)
            hi = np.where(pos, hi, mid)
            if np.all(hi - lo <= rtol * hi):
                break
        kappa[active] = 0.5 * (lo + hi)
    return kappa, ~active, lam, U


def evaluate_statistics(
    theta, s: MultivariableSummary, which: Sequence[str] = ("ar", "kleibergen", "andrews_wald"), n_jobs: int = 1
) -> dict[str, np.ndarray]:
    """Evaluate several statistics at a batch of points in one pass.

    ``which`` may contain ``ar``, ``kleibergen`` (K*), ``andrews_wald`` and
    ``kleibergen_oh``; the result also holds ``kappa2`` when K-OH is requested
    and a boolean ``failed`` array. Points are processed in fixed-size chunks,
    spread over ``n_jobs`` threads; results do not depend on ``n_jobs``.
    """
    pts, single = _points(theta, s.K)
    which = tuple(which)
    # chunk boundaries depend only on the number of points, never on n_jobs,
    # so every thread count performs the same floating-point operations
    starts = range(0, len(pts), CHUNK_POINTS)

    def task(i):
        return _evaluate_chunk(pts[i:i + CHUNK_POINTS], s, which)

    if n_jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(task, starts))
    else:
        parts = [task(i) for i in starts]
    out = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
    if single:
        return {key: val[0] for key, val in out.items()}
    return out


def _evaluate_chunk(pts, s: MultivariableSummary, which) -> dict[str, np.ndarray]:
    om = _omega_batch(pts, s)
    g, u, Oi_gamma, D, OiD, ok = _score_terms(pts, s, om)
    out: dict[str, np.ndarray] = {}
    failed = ~ok
    if "ar" in which:
        out["ar"] = np.where(ok, s.n_X * np.einsum("pj,pj->p", g, u), np.nan)
    if "kleibergen" in which:
        ks, _, ok_k = _projection(D, OiD, u, s.n_X)
        out["kleibergen"] = np.where(ok & ok_k, ks, np.nan)
        failed |= ~ok_k
    if "andrews_wald" in which:
        aw, _, ok_a = _projection(s.gamma_hat[None].repeat(len(pts), 0), Oi_gamma, u, s.n_X)
        out["andrews_wald"] = np.where(ok & ok_a, aw, np.nan)
        failed |= ~ok_a
    if "kleibergen_oh" in which:
        kappa, _, lam, U = _kappa2_batch(g, om, s.n_X, s.c)
        om_oh = om + (s.c * kappa)[:, None, None] * np.eye(s.J)[None]
        _, u2, _, D2, OiD2, ok2 = _score_terms(pts, s, om_oh)
        koh, _, ok_o = _projection(D2, OiD2, u2, s.n_X)
        out["kleibergen_oh"] = np.where(ok2 & ok_o, koh, np.nan)
        out["kappa2"] = kappa
        failed |= ~(ok2 & ok_o)
    out["failed"] = failed
    return out


def _single(theta, s, name, error):
    pts, single = _points(theta, s.K)
    vals = evaluate_statistics(pts, s, (name,))
    if single and vals["failed"][0]:
        raise NumericalError(error)
    return _unwrap(vals[name], single)


def ar_stat(theta, s: MultivariableSummary):
    """Anderson-Rubin statistic n_X * Q(theta)."""
    return _single(theta, s, "ar", "Omega not PD")


def kleibergen_D(theta, s: MultivariableSummary) -> np.ndarray:
    """Columns gamma_k - Delta_k' Omega^{-1} g, with Delta = -phi(theta) Sigma_gamma."""
    pts, single = _points(theta, s.K)
    om = _omega_batch(pts, s)
    _, _, _, D, _, ok = _score_terms(pts, s, om)
    if not ok.all():
        raise NumericalError("Omega not PD")
    return _unwrap(D, single)


def kstar_stat(theta, s: MultivariableSummary, return_theta_star: bool = False):
    """Kleibergen score statistic in projection form, optionally with theta*.

    ``K* = n_X g'Oi D (D'Oi D)^{-1} D'Oi g`` where ``Oi = Omega(theta)^{-1}``;
    theta* is ``theta + (D'Oi D)^{-1} D'Oi g``.
    """
    pts, single = _points(theta, s.K)
    om = _omega_batch(pts, s)
    _, u, _, D, OiD, ok = _score_terms(pts, s, om)
    value, step, ok_k = _projection(D, OiD, u, s.n_X)
    if single and not (ok[0] and ok_k[0]):
        rank = np.linalg.matrix_rank(D[0]) if ok[0] else 0
        raise NumericalError(f"unidentified direction: D(theta) has rank {rank} < {s.K}")
    value = np.where(ok & ok_k, value, np.nan)
    if return_theta_star:
        return _unwrap(value, single), _unwrap(pts + step, single)
    return _unwrap(value, single)


def andrews_wald_stat(theta, s: MultivariableSummary, return_theta_bar: bool = False):
    """Wald statistic centred at theta_bar(theta) = theta + (g'Oi g)^{-1} gamma'Oi g."""
    pts, single = _points(theta, s.K)
    om = _omega_batch(pts, s)
    _, u, Oi_gamma, _, _, ok = _score_terms(pts, s, om)
    value, step, ok_a = _projection(s.gamma_hat[None].repeat(len(pts), 0), Oi_gamma, u, s.n_X)
    if single and not (ok[0] and ok_a[0]):
        raise NumericalError("collinear exposures")
    value = np.where(ok & ok_a, value, np.nan)
    if return_theta_bar:
        return _unwrap(value, single), _unwrap(pts + step, single)
    return _unwrap(value, single)


def lc_stat(theta, s: MultivariableSummary, a: float):
    """Linear combination K*(theta) + a S(theta)."""
    vals = evaluate_statistics(theta, s, ("ar", "kleibergen"))
    if np.ndim(vals["failed"]) == 0 and vals["failed"]:
        raise NumericalError("unidentified direction")
    return vals["kleibergen"] + a * vals["ar"]


# ---------------------------------------------------------------------------
# critical values for the linear combination


class MixtureDraws:
    """Shared chi-squared draws for quantiles of (1+a) chi2_K + a chi2_{J-K}.

    The same draws serve every weight ``a``, so quantiles are nondecreasing
    in ``a``. Solved weights are memoized per (gamma, alpha).
    """

    def __init__(self, J: int, K: int, draws: int = 100_000, seed: int = 0):
        if J < K:
            raise ValueError("need J >= K")
        if draws < 10_000:
            raise ValueError("need at least 10000 draws")
        self.J, self.K, self.draws, self.seed = J, K, draws, seed
        rng = np.random.default_rng(seed)
        self.chi_k = rng.chisquare(K, draws)
        self.chi_rest = rng.chisquare(J - K, draws) if J > K else np.zeros(draws)
        self.chi_k.setflags(write=False)
        self.chi_rest.setflags(write=False)
        self._a_cache: dict[tuple[float, float], LcCalibration] = {}

    def quantile(self, a: float, level: float) -> float:
        if not 0.0 <= a <= 1.0:
            raise ValueError("weight a must lie in [0, 1]")
        return float(np.quantile((1.0 + a) * self.chi_k + a * self.chi_rest, level))


@functools.lru_cache(maxsize=64)
def mixture_draws(J: int, K: int, draws: int = 100_000, seed: int = 0) -> MixtureDraws:
    """Cached :class:`MixtureDraws` store."""
    return MixtureDraws(J, K, draws, seed)


def crit_value(a: float, J: int, K: int, alpha_level: float = 0.05, draws: int = 100_000, seed: int = 0) -> float:
    """Simulated 1 - alpha quantile of (1+a) chi2_K + a chi2_{J-K}."""
    return mixture_draws(J, K, draws, seed).quantile(a, 1.0 - alpha_level)


@dataclass
class LcCalibration:
    a: float
    gamma: float
    alpha: float
    quantile: float
    draws: int
    seed: int
    J: int
    K: int
    at_boundary: bool = False


def solve_a(gamma_distortion: float, J: int, K: int, alpha_level: float, cal: MixtureDraws) -> LcCalibration:
    """Weight a(gamma) with q(1 - alpha - gamma; a) = chi2_{K, 1-alpha}.

    Bisection on [0, 1] to 1e-4, returning the upper end so the defining
    quantile is at least the target. If even a = 1 falls short, a = 1 is
    returned with ``at_boundary`` set.
    """
    if (cal.J, cal.K) != (J, K):
        raise ValueError("draw store dimensions do not match J, K")
    key = (round(gamma_distortion, 12), round(alpha_level, 12))
    if key in cal._a_cache:
        return cal._a_cache[key]
    target = stats.chi2.ppf(1.0 - alpha_level, K)
    level = max(1.0 - alpha_level - gamma_distortion, 0.0)
    at_boundary = False
    if cal.quantile(0.0, level) >= target:
        a = 0.0
    elif cal.quantile(1.0, level) < target:
        a, at_boundary = 1.0, True
    else:
        lo, hi = 0.0, 1.0
        while hi - lo > 1e-4:
            mid = 0.5 * (lo + hi)
            if cal.quantile(mid, level) >= target:
                hi = mid
            else:
                lo = mid
        a = hi
    result = LcCalibration(
        a=a, gamma=gamma_distortion, alpha=alpha_level, quantile=cal.quantile(a, 1.0 - alpha_level),
        draws=cal.draws, seed=cal.seed, J=J, K=K, at_boundary=at_boundary,
    )
    cal._a_cache[key] = result
    return result


# ---------------------------------------------------------------------------
# overdispersion


@dataclass
class OverdispersionFit:
    kappa2: float
    at_boundary: bool


def solve_kappa2(theta, s: MultivariableSummary) -> OverdispersionFit:
    """Solve n_X g' Omega(theta, k)^{-1} g = J for the overdispersion k >= 0."""
    pts, single = _points(theta, s.K)
    if not single:
        raise ValueError("solve_kappa2 takes a single theta")
    g = moment_function(pts, s)
    kappa, boundary, _, _ = _kappa2_batch(g, _omega_batch(pts, s), s.n_X, s.c)
    return OverdispersionFit(kappa2=float(kappa[0]), at_boundary=bool(boundary[0]))


def kleibergen_oh_stat(theta, s: MultivariableSummary):
    """K* recomputed with Omega(theta) + c kappa2(theta) I throughout."""
    return _single(theta, s, "kleibergen_oh", "unidentified direction")


# ---------------------------------------------------------------------------
# test inversion


@dataclass
class ConfidenceSetResult:
    method: str
    alpha: float
    critical_value: float
    member: np.ndarray
    area: int
    empty: bool
    touches_boundary: bool
    stat_values: np.ndarray | None = None
    n_failed: int = 0
    failed_points: list[int] = field(default_factory=list)
    unreliable: bool = False
    a: float | None = None

    @classmethod
    def from_stats(cls, method, alpha, crit, values, grid: ThetaGrid, keep_stats=False, a=None):
        values = np.asarray(values, dtype=float)
        failed = ~np.isfinite(values)
        member = np.zeros(values.shape, dtype=bool)
        member[~failed] = values[~failed] <= crit
        n_failed = int(failed.sum())
        return cls(
            method=method, alpha=alpha, critical_value=float(crit), member=member,
            area=int(member.sum()), empty=not member.any(),
            touches_boundary=bool(np.any(member & grid.edge_mask)),
            stat_values=values if keep_stats else None,
            n_failed=n_failed, failed_points=np.flatnonzero(failed).tolist(),
            unreliable=n_failed > UNRELIABLE_FAILURE_RATE * values.size, a=a,
        )

    def projected_intervals(self, grid: ThetaGrid) -> list[tuple[float, float] | None]:
        """Per-coordinate [min, max] over member points (a grid projection)."""
        if self.empty:
            return [None] * grid.K
        pts = grid.points[self.member]
        return [(float(pts[:, k].min()), float(pts[:, k].max())) for k in range(grid.K)]


def critical_value(method: str, s: MultivariableSummary, alpha: float, cal: LcCalibration | None = None) -> float:
    if method == "ar":
        return float(stats.chi2.ppf(1.0 - alpha, s.J))
    if method == "lc_robust":
        if cal is None:
            raise ValueError("lc_robust needs a calibration")
        return cal.quantile
    if method in METHODS:
        return float(stats.chi2.ppf(1.0 - alpha, s.K))
    raise ValueError(f"unknown method {method!r}")


def invert_confidence_set(
    method: str,
    grid: ThetaGrid,
    s: MultivariableSummary,
    alpha_level: float = 0.05,
    cal: LcCalibration | None = None,
    estimate: Estimate | None = None,
    keep_stats: bool = False,
    n_jobs: int = 1,
) -> ConfidenceSetResult:
    """Collect the grid points whose statistic does not exceed the critical value.

    ``cal`` is required for ``lc_robust`` (its quantile is the critical value)
    and ``cs_p`` (its weight enters the statistic). ``wald`` uses the GMM
    estimate, computed here if not supplied.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method in ("lc_robust", "cs_p") and cal is None:
        raise ValueError(f"{method} needs an LcCalibration")
    pts = grid.points
    if method == "wald":
        est = estimate if estimate is not None else gmm_estimate(s)
        values = wald_stat(pts, est, s.n_X)
    elif method in ("lc_robust", "cs_p"):
        vals = evaluate_statistics(pts, s, ("ar", "kleibergen"), n_jobs=n_jobs)
        values = vals["kleibergen"] + cal.a * vals["ar"]
    else:
        values = evaluate_statistics(pts, s, (method,), n_jobs=n_jobs)[method]
    crit = critical_value(method, s, alpha_level, cal)
    return ConfidenceSetResult.from_stats(
        method, alpha_level, crit, values, grid, keep_stats, a=cal.a if cal is not None else None
    )


# ---------------------------------------------------------------------------
# distortion cutoff


class DistortionCutoff(NamedTuple):
    gamma_hat: float | None
    cs_n: ConfidenceSetResult
    cs_r: ConfidenceSetResult
    gamma_cap: float
    calibration: LcCalibration

    @property
    def determined(self) -> bool:
        return self.gamma_hat is not None


def gamma_levels(gamma_min: float, gamma_step: float, gamma_cap: float) -> np.ndarray:
    n = int(math.floor((gamma_cap - gamma_min) / gamma_step + 1e-9)) + 1
    return np.round(gamma_min + gamma_step * np.arange(max(n, 1)), 10)


def scan_distortion(
    kstar: np.ndarray,
    ar: np.ndarray,
    cs_n_member: np.ndarray,
    store: MixtureDraws,
    alpha_level: float,
    gamma_min: float,
    gamma_step: float = 0.01,
    gamma_cap: float | None = None,
) -> float | None:
    """Smallest gamma on the scan with CS_P(gamma) contained in CS_N, else None."""
    cap = 1.0 - alpha_level if gamma_cap is None else gamma_cap
    chi_k = stats.chi2.ppf(1.0 - alpha_level, store.K)
    finite = np.isfinite(kstar) & np.isfinite(ar)
    outside = finite & ~cs_n_member
    if not outside.any():
        return float(gamma_min)
    ks, sv = kstar[outside], ar[outside]
    for gamma in gamma_levels(gamma_min, gamma_step, cap):
        a = solve_a(float(gamma), store.J, store.K, alpha_level, store).a
        if not np.any(ks + a * sv <= chi_k):
            return float(gamma)
    return None


def distortion_cutoff(
    grid: ThetaGrid,
    s: MultivariableSummary,
    alpha_level: float = 0.05,
    gamma_min: float = 0.01,
    gamma_step: float = 0.01,
    gamma_cap: float | None = None,
    draws: int = 100_000,
    seed: int = 0,
    n_jobs: int = 1,
) -> DistortionCutoff:
    """Scan gamma upward from ``gamma_min`` until CS_P(gamma) lies inside CS_N.

    CS_N inverts the Andrews-Wald statistic and CS_R is the linear-combination
    set at a(gamma_min). ``gamma_hat`` is None when no level up to the cap
    passes.
    """
    if gamma_min < 0.001:
        raise ValueError("gamma_min must be at least 0.001")
    cap = 1.0 - alpha_level if gamma_cap is None else gamma_cap
    store = mixture_draws(s.J, s.K, draws, seed)
    cal = solve_a(gamma_min, s.J, s.K, alpha_level, store)
    vals = evaluate_statistics(grid.points, s, ("ar", "kleibergen", "andrews_wald"), n_jobs=n_jobs)
    chi_k = stats.chi2.ppf(1.0 - alpha_level, s.K)
    cs_n = ConfidenceSetResult.from_stats("andrews_wald", alpha_level, chi_k, vals["andrews_wald"], grid)
    cs_r = ConfidenceSetResult.from_stats(
        "lc_robust", alpha_level, cal.quantile, vals["kleibergen"] + cal.a * vals["ar"], grid, a=cal.a
    )
    gamma_hat = scan_distortion(
        vals["kleibergen"], vals["ar"], cs_n.member, store, alpha_level, gamma_min, gamma_step, cap
    )
    return DistortionCutoff(gamma_hat, cs_n, cs_r, cap, cal)


# ---------------------------------------------------------------------------
# instrument selection


def _pick(keys) -> int:
    """Index carried by the smallest (score, n_instruments, position) key."""
    return min(keys)[2]


@dataclass
class SelectionResult:
    chosen: int
    subset: list[int]
    scores: list[float]
    failures: dict[int, str]


def select_instruments(
    candidates: Sequence[Sequence[int]],
    builder: Callable[[Sequence[int]], MultivariableSummary],
    strategy: str,
    grid: ThetaGrid | None = None,
    alpha_level: float = 0.05,
    gamma_min: float = 0.01,
    draws: int = 100_000,
    seed: int = 0,
) -> SelectionResult:
    """Pick the candidate subset maximising min conditional F or minimising gamma_hat.

    Undetermined gamma_hat counts as +inf. Ties go to fewer instruments, then
    to the earlier candidate.
    """
    if strategy not in ("max_min_condf", "min_distortion"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "min_distortion" and grid is None:
        raise ValueError("min_distortion needs a grid")
    keys, scores, failures = [], [], {}
    for i, subset in enumerate(candidates):
        try:
            s = builder(subset)
            if strategy == "max_min_condf":
                score = conditional_f_report(s).min_f
                key = -score
            else:
                res = distortion_cutoff(grid, s, alpha_level, gamma_min, draws=draws, seed=seed)
                score = math.inf if res.gamma_hat is None else res.gamma_hat
                key = score
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            failures[i] = str(exc)
            scores.append(math.nan)
            continue
        scores.append(score)
        keys.append((key, len(subset), i))
    if not keys:
        raise ValueError("no candidate instrument subset could be evaluated")
    chosen = _pick(keys)
    return SelectionResult(chosen=chosen, subset=list(candidates[chosen]), scores=scores, failures=failures)
