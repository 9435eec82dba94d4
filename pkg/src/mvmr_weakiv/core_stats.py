"""Moment functions, GMM/IVW estimation, Wald statistics and conditional F.

All functions taking ``theta`` accept either a single K-vector or a
(P, K) array of points; batched inputs return one value per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .summary_data import MultivariableSummary

__all__ = [
    "NumericalError",
    "Estimate",
    "ConditionalFReport",
    "moment_function",
    "omega",
    "gmm_criterion",
    "gmm_gradient",
    "ivw_estimate",
    "gmm_estimate",
    "wald_stat",
    "conditional_f",
    "conditional_f_report",
]

COLLINEAR_COND_LIMIT = 1e12


class NumericalError(ArithmeticError):
    """A statistic could not be evaluated (singular or indefinite matrices)."""


@dataclass
class Estimate:
    theta: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    criterion_value: float
    converged: bool
    method: str = "gmm"


@dataclass
class ConditionalFReport:
    f_stats: np.ndarray
    min_f: float
    delta_at_min: list[np.ndarray]


def _points(theta, K: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(theta, dtype=float)
    single = arr.ndim <= 1
    return arr.reshape(-1, K), single


def _unwrap(values: np.ndarray, single: bool):
    return values[0] if single else values


def _quad_blocks(weights: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """sum_{a,b} w_a w_b B_ab for each row of weights -> (P, J, J)."""
    return np.einsum("pa,pb,abij->pij", weights, weights, blocks, optimize=True)


def _omega_batch(pts: np.ndarray, s: MultivariableSummary) -> np.ndarray:
    om = s.Sigma_Gamma[None] + _quad_blocks(pts, s.blocks)
    return 0.5 * (om + om.transpose(0, 2, 1))


def moment_function(theta, s: MultivariableSummary) -> np.ndarray:
    """Moment vector ``Gamma_hat - gamma_hat @ theta``."""
    pts, single = _points(theta, s.K)
    return _unwrap(s.Gamma_hat[None, :] - pts @ s.gamma_hat.T, single)


def omega(theta, s: MultivariableSummary) -> np.ndarray:
    """Variance of the moment vector at ``theta`` (sqrt(n_X) scale)."""
    pts, single = _points(theta, s.K)
    om = _omega_batch(pts, s)
    if np.any(np.linalg.eigvalsh(om)[:, 0] <= 0):
        raise NumericalError("Omega not PD")
    return _unwrap(om, single)


def gmm_criterion(theta, s: MultivariableSummary):
    """Continuously-updated GMM criterion g' Omega^{-1} g."""
    pts, single = _points(theta, s.K)
    g = moment_function(pts, s)
    om = _omega_batch(pts, s)
    try:
        u = np.linalg.solve(om, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise NumericalError("Omega not PD") from None
    return _unwrap(np.einsum("pj,pj->p", g, u), single)


def gmm_gradient(theta, s: MultivariableSummary) -> np.ndarray:
    """Gradient of :func:`gmm_criterion` at a single point."""
    y, X, B, C = _gmm_system(s)
    return _cu_value_grad(np.asarray(theta, dtype=float), y, X, B, C)[1]


# ---------------------------------------------------------------------------
# generic continuously-updated minimum-distance problem
#
#   min_b (y - X b)' V(b)^{-1} (y - X b),  V(b) = C + sum_{a,b} w_a w_b B_ab,
#   w = (1, -b).
#
# The GMM criterion and the conditional F inner problem are both instances.


def _gmm_system(s: MultivariableSummary):
    J, K = s.J, s.K
    B = np.zeros((K + 1, K + 1, J, J))
    B[1:, 1:] = s.blocks
    return s.Gamma_hat, s.gamma_hat, B, s.Sigma_Gamma


def _cu_value_grad(beta, y, X, B, C):
    w = np.concatenate(([1.0], -beta))
    V = C + np.einsum("a,b,abij->ij", w, w, B)
    r = y - X @ beta
    u = np.linalg.solve(V, r)
    value = float(r @ u)
    grad = -2.0 * X.T @ u + 2.0 * np.einsum("b,mbij,i,j->m", w, B[1:], u, u)
    return value, grad


def _cu_value(beta, y, X, B, C):
    try:
        return _cu_value_grad(beta, y, X, B, C)[0]
    except np.linalg.LinAlgError:
        return np.inf


def _cu_minimize(y, X, B, C, init, max_iter=200, tol=1e-10):
    """Iterated GLS from ``init``, then quasi-Newton polish of the exact criterion."""
    beta = np.asarray(init, dtype=float).copy()
    best, best_val = beta.copy(), _cu_value(beta, y, X, B, C)
    gls_converged = False
    for _ in range(max_iter):
        w = np.concatenate(([1.0], -beta))
        V = C + np.einsum("a,b,abij->ij", w, w, B)
        try:
            VX = np.linalg.solve(V, X)
            new = np.linalg.solve(X.T @ VX, VX.T @ y)
        except np.linalg.LinAlgError:
            break
        val = _cu_value(new, y, X, B, C)
        if val < best_val:
            best, best_val = new.copy(), val
        step = np.linalg.norm(new - beta)
        beta = new
        if step < tol * (1.0 + np.linalg.norm(beta)):
            gls_converged = True
            break

    def fun(b):
        try:
            return _cu_value_grad(b, y, X, B, C)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(b)

    res = optimize.minimize(fun, best, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 500})
    polished = res.success
    if np.isfinite(res.fun) and res.fun <= best_val:
        best, best_val = res.x, float(res.fun)
    if not (gls_converged or polished):
        nm = optimize.minimize(
            lambda b: _cu_value(b, y, X, B, C), best, method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000},
        )
        polished = nm.success
        if nm.fun < best_val:
            best, best_val = nm.x, float(nm.fun)
    return best, best_val, bool(gls_converged or polished)


# ---------------------------------------------------------------------------
# estimators


def _finish(theta, cov, s, value, converged, method) -> Estimate:
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None) / s.n_X)
    return Estimate(theta=theta, cov=cov, se=se, criterion_value=float(value), converged=converged, method=method)


def ivw_estimate(s: MultivariableSummary) -> Estimate:
    """Multivariable IVW: GLS of Gamma_hat on gamma_hat weighted by Sigma_Gamma^{-1}."""
    W_gamma = np.linalg.solve(s.Sigma_Gamma, s.gamma_hat)
    A = s.gamma_hat.T @ W_gamma
    if np.linalg.cond(A) > COLLINEAR_COND_LIMIT:
        raise NumericalError("collinear exposures")
    theta = np.linalg.solve(A, W_gamma.T @ s.Gamma_hat)
    return _finish(theta, np.linalg.inv(A), s, gmm_criterion(theta, s), True, "ivw")


def gmm_estimate(s: MultivariableSummary, init=None) -> Estimate:
    """Continuously-updating GMM estimate started at IVW (or ``init``).

    Further starts come from a scan over directions of ``(1, -theta)``; the
    lowest local minimum found is returned.

    The covariance is ``(gamma' Omega(theta)^{-1} gamma)^{-1}`` at the optimum;
    standard errors divide its diagonal by n_X.
    """
    y, X, B, C = _gmm_system(s)
    ivw = ivw_estimate(s)
    start = ivw.theta if init is None else np.asarray(init, dtype=float)
    theta, value, converged = _cu_minimize(y, X, B, C, start)
    full = B.copy()
    full[0, 0] = C
    for extra in _direction_starts(np.column_stack([y, X]), full):
        t2, v2, c2 = _cu_minimize(y, X, B, C, extra)
        if v2 < value - 1e-12:
            theta, value, converged = t2, v2, c2
    if init is not None and ivw.criterion_value < value:
        theta, value = ivw.theta, ivw.criterion_value
    om = omega(theta, s)
    A = s.gamma_hat.T @ np.linalg.solve(om, s.gamma_hat)
    return _finish(theta, np.linalg.inv(A), s, value, converged, "gmm")


def wald_stat(theta, est: Estimate, n_X: float):
    """n_X (theta_hat - theta)' cov^{-1} (theta_hat - theta)."""
    K = est.theta.shape[0]
    pts, single = _points(theta, K)
    d = est.theta[None, :] - pts
    prec = np.linalg.inv(est.cov)
    return _unwrap(n_X * np.einsum("pk,km,pm->p", d, prec, d), single)


# ---------------------------------------------------------------------------
# conditional F


def conditional_f(s: MultivariableSummary, k: int) -> tuple[float, np.ndarray]:
    """Conditional F-statistic for exposure ``k`` and the minimizing delta.

    The inner problem regresses gamma_k on the other exposures' columns with
    weight ``[h(delta) Sigma_gamma,k h(delta)']^{-1}``, where the J-row blocks
    of exposure k are moved first. For K = 1 there is nothing to condition on.
    """
    J, K = s.J, s.K
    B = s.blocks
    scale = s.n_X / (J - K + 1)
    yk = s.gamma_hat[:, k]
    if K == 1:
        value = float(yk @ np.linalg.solve(B[0, 0], yk))
        return scale * value, np.zeros(0)
    order = [k] + [m for m in range(K) if m != k]
    Bk = B[np.ix_(order, order)]
    Xk = s.gamma_hat[:, order[1:]]
    init = np.linalg.lstsq(Xk, yk, rcond=None)[0]
    delta, value, _ = _cu_minimize(yk, Xk, Bk, np.zeros((J, J)), init, max_iter=100, tol=1e-8)
    for start in _direction_starts(s.gamma_hat[:, order], Bk):
        d2, v2, _ = _cu_minimize(yk, Xk, Bk, np.zeros((J, J)), start, max_iter=100, tol=1e-8)
        if v2 < value:
            delta, value = d2, v2
    return scale * value, delta


def _direction_starts(G: np.ndarray, B: np.ndarray, n_best: int = 4) -> list[np.ndarray]:
    """Starting points from a scan of the criterion over directions of ``w``.

    With ``w = (1, -beta)`` the criterion ``(G w)' V(w)^{-1} (G w)``, where
    ``V(w) = sum_ab w_a w_b B_ab``, is unchanged when ``w`` is rescaled, so it
    is a function on the half sphere. Directions are scanned on a fixed
    deterministic design and the best few with a usable first coordinate are
    mapped back to ``beta = -w[1:] / w[0]``.
    """
    d = G.shape[1]
    if d == 2:
        phi = np.linspace(0.0, np.pi, 721, endpoint=False)
        W = np.column_stack([np.cos(phi), np.sin(phi)])
    elif d == 3:
        n = 2000
        i = np.arange(n) + 0.5
        z = i / n
        r = np.sqrt(1.0 - z**2)
        ang = np.pi * (1.0 + np.sqrt(5.0)) * i
        W = np.column_stack([z, r * np.cos(ang), r * np.sin(ang)])
    else:
        W = np.random.default_rng(0).standard_normal((600 * d, d))
        W *= np.sign(W[:, :1])
        W /= np.linalg.norm(W, axis=1, keepdims=True)
    V = _quad_blocks(W, B)
    r = W @ G.T
    try:
        vals = np.einsum("pj,pj->p", r, np.linalg.solve(V, r[..., None])[..., 0])
    except np.linalg.LinAlgError:
        return []
    usable = np.abs(W[:, 0]) > 1e-3
    idx = np.flatnonzero(usable)[np.argsort(vals[usable])][:n_best]
    return [-W[i, 1:] / W[i, 0] for i in idx]


def conditional_f_report(s: MultivariableSummary) -> ConditionalFReport:
    stats, deltas = [], []
    for k in range(s.K):
        f, d = conditional_f(s, k)
        stats.append(f)
        deltas.append(d)
    f_stats = np.array(stats)
    return ConditionalFReport(f_stats=f_stats, min_f=float(f_stats.min()), delta_at_min=deltas)
