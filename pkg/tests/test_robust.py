import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg, stats

from mvmr_weakiv import (
    MultivariableSummary,
    NumericalError,
    ThetaGrid,
    andrews_wald_stat,
    ar_stat,
    crit_value,
    distortion_cutoff,
    evaluate_statistics,
    gmm_estimate,
    invert_confidence_set,
    kleibergen_D,
    kleibergen_oh_stat,
    kstar_stat,
    lc_stat,
    omega,
    select_instruments,
    solve_a,
    solve_kappa2,
)
from mvmr_weakiv.robust import ConfidenceSetResult, MixtureDraws, mixture_draws, scan_distortion

from conftest import random_summary, summaries

CHI2_2 = stats.chi2.ppf(0.95, 2)


def scalar_summary(Gamma, gamma, SG, Sg, n_X=100.0, n_Y=100.0):
    return MultivariableSummary([Gamma], [[gamma]], [[SG]], [[Sg]], n_X, n_Y)


def with_sigma_gamma(s, Sg):
    return MultivariableSummary(s.Gamma_hat, s.gamma_hat, s.Sigma_Gamma, Sg, s.n_X, s.n_Y)


def exact_fit(s, theta):
    return MultivariableSummary(s.gamma_hat @ theta, s.gamma_hat, s.Sigma_Gamma, s.Sigma_gamma, s.n_X, s.n_Y)


# ---------------------------------------------------------------------------
# Anderson-Rubin and D


def test_ar_examples(summary):
    theta = np.array([0.3, -0.2])
    assert ar_stat(theta, exact_fit(summary, theta)) == pytest.approx(0.0, abs=1e-20)
    assert ar_stat([0.0], scalar_summary(0.1, 1.0, 1.0, 1.0)) == pytest.approx(1.0, rel=1e-14)
    assert ar_stat(theta, summary) == pytest.approx(summary.n_X * float(
        (summary.Gamma_hat - summary.gamma_hat @ theta)
        @ np.linalg.solve(omega(theta, summary), summary.Gamma_hat - summary.gamma_hat @ theta)), rel=1e-12)


def test_kleibergen_D_trivial_cases(summary):
    zero = with_sigma_gamma(summary, np.zeros_like(summary.Sigma_gamma))
    np.testing.assert_array_equal(kleibergen_D([0.4, 0.1], zero), summary.gamma_hat)
    np.testing.assert_allclose(kleibergen_D([0.0, 0.0], summary), summary.gamma_hat, rtol=0, atol=0)


def test_kleibergen_D_matches_full_matrix_oracle(rng):
    s = random_summary(rng, J=3, K=2)
    theta = np.array([0.8, -0.4])
    J, K = 3, 2
    # phi(theta) = I_J kron theta' acts on the row-stacked vec; permute Sigma_gamma into that order
    P = np.zeros((J * K, J * K))
    for j in range(J):
        for k in range(K):
            P[j * K + k, k * J + j] = 1
    phi = np.kron(np.eye(J), theta[None, :])
    Delta = -phi @ (P @ s.Sigma_gamma @ P.T)  # J x JK, row-stacked columns
    om = s.Sigma_Gamma + phi @ P @ s.Sigma_gamma @ P.T @ phi.T
    u = np.linalg.solve(om, s.Gamma_hat - s.gamma_hat @ theta)
    D = np.empty((J, K))
    for k in range(K):
        Delta_k = Delta[:, k::K]  # columns belonging to exposure k
        D[:, k] = s.gamma_hat[:, k] - Delta_k.T @ u
    np.testing.assert_allclose(kleibergen_D(theta, s), D, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# K*, Andrews-Wald, LC


def test_kstar_exact_fit(summary):
    theta = np.array([0.3, -0.2])
    val, star = kstar_stat(theta, exact_fit(summary, theta), return_theta_star=True)
    assert val == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(star, theta, atol=1e-14)
    aw, bar = andrews_wald_stat(theta, exact_fit(summary, theta), return_theta_bar=True)
    assert aw == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(bar, theta, atol=1e-14)


def test_kstar_equals_ar_when_just_identified(rng):
    s = random_summary(rng, J=2, K=2)
    for theta in ([0.0, 0.0], [1.0, -2.0], [0.3, 0.3]):
        assert kstar_stat(theta, s) == pytest.approx(ar_stat(theta, s), rel=1e-10)


def test_kstar_matches_factorization_oracle(rng):
    s = random_summary(rng, J=4, K=2)
    theta = np.array([0.5, 0.25])
    om = omega(theta, s)
    root_inv = np.linalg.inv(linalg.sqrtm(om).real)
    D = kleibergen_D(theta, s)
    A = root_inv @ D
    Pm = A @ np.linalg.pinv(A)
    v = root_inv @ (s.Gamma_hat - s.gamma_hat @ theta)
    expected = s.n_X * v @ Pm @ v
    assert kstar_stat(theta, s) == pytest.approx(expected, rel=1e-10)


def test_kstar_theta_star_formula(summary):
    theta = np.array([0.1, 0.2])
    _, star = kstar_stat(theta, summary, return_theta_star=True)
    D = kleibergen_D(theta, summary)
    om = omega(theta, summary)
    g = summary.Gamma_hat - summary.gamma_hat @ theta
    OiD = np.linalg.solve(om, D)
    np.testing.assert_allclose(star, theta + np.linalg.solve(D.T @ OiD, OiD.T @ g), rtol=1e-10)


def test_kstar_rank_deficient_raises(rng):
    s = random_summary(rng, J=4, K=2)
    gamma = s.gamma_hat.copy()
    gamma[:, 1] = 2 * gamma[:, 0]
    s0 = MultivariableSummary(s.Gamma_hat, gamma, s.Sigma_Gamma, np.zeros((8, 8)), s.n_X, s.n_Y)
    with pytest.raises(NumericalError, match="unidentified direction: D\\(theta\\) has rank 1 < 2"):
        kstar_stat([0.0, 0.0], s0)
    with pytest.raises(NumericalError, match="collinear exposures"):
        andrews_wald_stat([0.0, 0.0], s0)


def test_andrews_wald_matches_kstar_without_exposure_noise(summary):
    s0 = with_sigma_gamma(summary, np.zeros_like(summary.Sigma_gamma))
    for theta in ([0.2, 0.2], [-1.0, 0.5]):
        assert andrews_wald_stat(theta, s0) == kstar_stat(theta, s0)


def test_andrews_wald_wald_form(summary):
    theta = np.array([0.6, -0.1])
    val, bar = andrews_wald_stat(theta, summary, return_theta_bar=True)
    om = omega(theta, summary)
    A = summary.gamma_hat.T @ np.linalg.solve(om, summary.gamma_hat)
    d = bar - theta
    assert val == pytest.approx(summary.n_X * d @ A @ d, rel=1e-10)
    assert 0 <= val <= ar_stat(theta, summary) * (1 + 1e-12)


def test_lc_examples(rng, summary):
    theta = np.array([0.4, 0.7])
    assert lc_stat(theta, summary, 0.0) == kstar_stat(theta, summary)
    sj = random_summary(rng, J=2, K=2)
    assert lc_stat(theta, sj, 1.0) == pytest.approx(2 * ar_stat(theta, sj), rel=1e-10)
    combo = 0.3 * ar_stat(theta, summary) + kstar_stat(theta, summary)
    assert abs(lc_stat(theta, summary, 0.3) - combo) <= 1e-12 * combo


@settings(max_examples=60, deadline=None)
@given(summaries(), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_projection_bounds(s, raw):
    theta = np.array(raw[: s.K])
    vals = evaluate_statistics(theta, s, ("ar", "kleibergen", "andrews_wald"))
    if vals["failed"]:
        return
    S = vals["ar"]
    assert -1e-10 * max(S, 1) <= vals["kleibergen"] <= S * (1 + 1e-10) + 1e-12
    assert -1e-10 * max(S, 1) <= vals["andrews_wald"] <= S * (1 + 1e-10) + 1e-12


@settings(max_examples=40, deadline=None)
@given(summaries(J=2, K=2), st.floats(-3, 3), st.floats(-3, 3))
def test_kstar_equals_ar_property(s, t1, t2):
    vals = evaluate_statistics(np.array([t1, t2]), s, ("ar", "kleibergen"))
    assert abs(vals["kleibergen"] - vals["ar"]) <= 1e-8 * max(1.0, vals["ar"])


def test_batched_equals_pointwise(summary):
    pts = np.random.default_rng(1).normal(size=(7, 2))
    vals = evaluate_statistics(pts, summary, ("ar", "kleibergen", "andrews_wald", "kleibergen_oh"))
    for i, p in enumerate(pts):
        assert vals["ar"][i] == pytest.approx(ar_stat(p, summary), rel=1e-12)
        assert vals["kleibergen"][i] == pytest.approx(kstar_stat(p, summary), rel=1e-12)
        assert vals["kleibergen_oh"][i] == pytest.approx(kleibergen_oh_stat(p, summary), rel=1e-12)


# ---------------------------------------------------------------------------
# critical values and a(gamma)


def test_crit_value_examples():
    assert crit_value(0.0, 4, 2) == pytest.approx(5.991, abs=0.05)
    assert crit_value(1.0, 2, 2) == pytest.approx(2 * 5.991, abs=0.15)
    store = MixtureDraws(4, 2, 100_000, 3)
    assert store.quantile(0.0, 0.95) == np.quantile(store.chi_k, 0.95)


def test_crit_value_nondecreasing_in_a():
    qs = [crit_value(a, 6, 2, seed=5) for a in np.linspace(0, 1, 21)]
    assert all(b >= a for a, b in zip(qs, qs[1:]))


def test_draw_store_validation():
    with pytest.raises(ValueError):
        MixtureDraws(2, 3)
    with pytest.raises(ValueError):
        MixtureDraws(4, 2, draws=500)
    store = MixtureDraws(2, 2, 10_000, 0)
    assert np.all(store.chi_rest == 0)
    assert not store.chi_k.flags.writeable


def test_solve_a_limits_and_monotonicity():
    store = mixture_draws(4, 2, 100_000, 0)
    assert solve_a(1e-6, 4, 2, 0.05, store).a <= 1e-3
    small, large = solve_a(0.01, 4, 2, 0.05, store), solve_a(0.10, 4, 2, 0.05, store)
    assert large.a >= small.a and large.quantile >= small.quantile >= CHI2_2 - 1e-12
    assert solve_a(0.90, 4, 2, 0.05, store).at_boundary


def test_solve_a_reproducible_and_grid_scan_oracle():
    a1 = solve_a(0.05, 4, 2, 0.05, MixtureDraws(4, 2, 100_000, 11))
    store = MixtureDraws(4, 2, 100_000, 11)
    a2 = solve_a(0.05, 4, 2, 0.05, store)
    assert a1.a == a2.a and a1.quantile == a2.quantile
    # smallest a on a 1e-3 grid whose 1 - alpha - gamma quantile reaches the chi-squared target
    grid = np.arange(0, 1.0005, 0.001)
    ok = [store.quantile(a, 0.90) >= CHI2_2 for a in grid]
    a_grid = grid[ok.index(True)]
    assert a_grid - 0.001 - 1e-4 <= a2.a <= a_grid + 1e-12
    assert a2.a == pytest.approx(0.204, abs=0.01)


# ---------------------------------------------------------------------------
# overdispersion


def test_kappa2_scalar_closed_form(rng):
    for _ in range(50):
        g, sg, n = rng.normal(0, 0.2), rng.uniform(0.5, 2), rng.uniform(100, 1000)
        s = scalar_summary(g, 1.0, sg, 0.3, n_X=n, n_Y=n / rng.uniform(0.5, 2))
        fit = solve_kappa2([0.0], s)
        expected = (n * g**2 - sg) / s.c
        if expected > 0:
            assert not fit.at_boundary
            assert fit.kappa2 == pytest.approx(expected, rel=1e-10)
        else:
            assert fit.at_boundary and fit.kappa2 == 0.0


def test_kappa2_truncation_and_residual(summary):
    theta = np.array([0.3, 0.1])
    fit = solve_kappa2(theta, summary)
    S = ar_stat(theta, summary)
    assert fit.at_boundary == (S <= summary.J)
    if not fit.at_boundary:
        om = omega(theta, summary) + summary.c * fit.kappa2 * np.eye(summary.J)
        g = summary.Gamma_hat - summary.gamma_hat @ theta
        assert abs(summary.n_X * g @ np.linalg.solve(om, g) - summary.J) < 1e-8 * summary.J
    exact = exact_fit(summary, theta)
    assert solve_kappa2(theta, exact).at_boundary


def test_kappa2_decreases_when_outcome_noise_doubles(rng):
    for _ in range(20):
        s = random_summary(rng, J=5, K=2, noise=1.0)
        theta = np.zeros(2)
        doubled = MultivariableSummary(s.Gamma_hat, s.gamma_hat, 2 * s.Sigma_Gamma, s.Sigma_gamma, s.n_X, s.n_Y)
        k1, k2 = solve_kappa2(theta, s).kappa2, solve_kappa2(theta, doubled).kappa2
        assert k2 <= k1 and (k1 == 0 or k2 < k1)


def test_kleibergen_oh_reduces_to_kstar_without_overdispersion(summary):
    theta = np.array([0.3, 0.1])
    exactish = exact_fit(summary, theta)
    near = theta + 1e-4
    assert solve_kappa2(near, exactish).at_boundary
    assert kleibergen_oh_stat(near, exactish) == kstar_stat(near, exactish)


def test_kleibergen_oh_scalar_monotone(rng):
    # scalar just-identified case: K-OH = n g^2 / (omega + c kappa2), equal to J once kappa2 > 0
    values = []
    for g in (0.2, 0.4, 0.8):
        s = scalar_summary(g, 1.0, 1.0, 0.0, n_X=100)
        values.append(kleibergen_oh_stat([0.0], s))
        base = kstar_stat([0.0], s)
        assert values[-1] <= base
    np.testing.assert_allclose(values, 1.0, rtol=1e-9)
    for extra in (0.0, 1.0, 4.0):
        s = scalar_summary(0.4, 1.0, 1.0 + extra, 0.0, n_X=100)
        values.append(kstar_stat([0.0], s))
    assert values[3] > values[4] > values[5]


# ---------------------------------------------------------------------------
# grids and confidence sets


def test_grid_parse_and_size():
    grid = ThetaGrid.parse("-2:2:0.04,-2:2:0.04")
    assert grid.shape == (101, 101) and grid.size == 10201
    assert grid.axes[0][0] == -2.0 and grid.axes[0][-1] == 2.0
    np.testing.assert_array_equal(grid.points[:2], [[-2.0, -2.0], [-2.0, -1.96]])
    assert grid.edge_mask.sum() == 4 * 100
    with pytest.raises(ValueError):
        ThetaGrid.parse("0:1")
    with pytest.raises(ValueError):
        ThetaGrid(([0.0, 0.0],))


def test_wald_set_noiseless_strong(rng):
    gamma = 5 * rng.normal(size=(4, 2))
    theta0 = np.array([1.0, 0.0])
    s = MultivariableSummary(gamma @ theta0, gamma, np.eye(4), 0.01 * np.eye(8), 5000, 5000)
    grid = ThetaGrid.parse("0.9:1.1:0.002,-0.1:0.1:0.002")
    res = invert_confidence_set("wald", grid, s)
    assert res.member[grid.nearest_index(theta0)]
    # contiguous: every axis line through the set is an unbroken run
    mask = res.member.reshape(grid.shape)
    for row in mask:
        idx = np.flatnonzero(row)
        assert idx.size == 0 or idx[-1] - idx[0] + 1 == idx.size
    assert not res.touches_boundary and not res.empty


def test_ar_set_empty_under_gross_heterogeneity(rng):
    gamma = rng.normal(size=(6, 2))
    Gamma = 50 * np.array([1, -1, 1, -1, 1, -1.0])
    s = MultivariableSummary(Gamma, gamma, np.eye(6), 0.01 * np.eye(12), 5000, 5000)
    res = invert_confidence_set("ar", ThetaGrid.parse("-5:5:0.1,-5:5:0.1"), s)
    assert res.empty and res.area == 0


def test_membership_matches_statistic(summary):
    grid = ThetaGrid.parse("-1:1:0.1,-1:1:0.1")
    store = mixture_draws(4, 2, 100_000, 0)
    cal = solve_a(0.01, 4, 2, 0.05, store)
    for method in ("ar", "kleibergen", "andrews_wald", "lc_robust", "kleibergen_oh", "wald"):
        res = invert_confidence_set(method, grid, summary, cal=cal, keep_stats=True)
        np.testing.assert_array_equal(res.member, res.stat_values <= res.critical_value)
        assert res.area == res.member.sum() and res.empty == (res.area == 0)
        assert res.touches_boundary == bool(np.any(res.member & grid.edge_mask))
    assert invert_confidence_set("ar", grid, summary).critical_value == pytest.approx(stats.chi2.ppf(0.95, 4))
    assert invert_confidence_set("lc_robust", grid, summary, cal=cal).critical_value == cal.quantile


def test_failed_points_are_counted_not_dropped():
    grid = ThetaGrid.parse("-1:1:0.5,-1:1:0.5")
    vals = np.arange(grid.size, dtype=float)
    vals[[3, 7]] = np.nan
    res = ConfidenceSetResult.from_stats("ar", 0.05, 100.0, vals, grid)
    assert res.n_failed == 2 and res.failed_points == [3, 7]
    assert not res.member[3] and res.unreliable
    assert res.area == grid.size - 2


def test_projected_intervals():
    grid = ThetaGrid.parse("0:1:0.25,0:1:0.5")
    vals = np.full(grid.size, 10.0)
    vals[[4, 7]] = 0.0  # (0.25, 0.5) and (0.5, 0.5)
    res = ConfidenceSetResult.from_stats("ar", 0.05, 1.0, vals, grid)
    assert res.projected_intervals(grid) == [(0.25, 0.5), (0.5, 0.5)]
    assert ConfidenceSetResult.from_stats("ar", 0.05, -1.0, vals, grid).projected_intervals(grid) == [None, None]


def test_lc_requires_calibration(summary):
    with pytest.raises(ValueError):
        invert_confidence_set("lc_robust", ThetaGrid.parse("0:1:0.5,0:1:0.5"), summary)


def test_thread_count_does_not_change_results(summary):
    grid = ThetaGrid.parse("-2:2:0.02,-2:2:0.02")
    which = ("ar", "kleibergen", "andrews_wald", "kleibergen_oh")
    one = evaluate_statistics(grid.points, summary, which, n_jobs=1)
    four = evaluate_statistics(grid.points, summary, which, n_jobs=4)
    for key in one:
        assert one[key].tobytes() == four[key].tobytes()


# ---------------------------------------------------------------------------
# distortion cutoff


def test_cs_p_monotone_in_gamma(summary):
    grid = ThetaGrid.parse("-2:2:0.05,-2:2:0.05")
    store = mixture_draws(4, 2, 100_000, 0)
    prev = None
    for gamma in (0.01, 0.03, 0.1, 0.3):
        res = invert_confidence_set("cs_p", grid, summary, cal=solve_a(gamma, 4, 2, 0.05, store))
        if prev is not None:
            assert not np.any(res.member & ~prev)
        prev = res.member


def test_cs_r_contains_cs_p_at_gamma_min(summary):
    grid = ThetaGrid.parse("-2:2:0.05,-2:2:0.05")
    cut = distortion_cutoff(grid, summary, gamma_min=0.01)
    cs_p = invert_confidence_set("cs_p", grid, summary, cal=cut.calibration)
    assert not np.any(cs_p.member & ~cut.cs_r.member)
    assert cut.cs_r.critical_value >= CHI2_2


def test_distortion_cutoff_strong_instruments(rng):
    gamma = 3 * rng.normal(size=(4, 2))
    s = MultivariableSummary(gamma @ np.array([1.0, 0.0]) + 0.01 * rng.normal(size=4), gamma,
                             np.eye(4), 0.01 * np.eye(8), 5000, 5000)
    est = gmm_estimate(s)
    ax = ",".join(f"{t - 0.1}:{t + 0.1}:0.002" for t in est.theta)
    cut = distortion_cutoff(ThetaGrid.parse(ax), s, gamma_min=0.05)
    assert cut.gamma_hat == 0.05 and cut.determined


def test_scan_with_empty_cs_n_proceeds():
    store = mixture_draws(4, 2, 100_000, 0)
    kstar = np.array([1.0, 3.0])
    ar = np.array([10.0, 20.0])
    member = np.zeros(2, dtype=bool)
    # CS_P(gamma) loses point 0 once K* + a S > chi2_2, i.e. a > 0.4991
    g = scan_distortion(kstar, ar, member, store, 0.05, 0.01)
    assert g is not None and g > 0.01
    assert solve_a(g, 4, 2, 0.05, store).a * 10 + 1 > CHI2_2
    assert solve_a(round(g - 0.01, 10), 4, 2, 0.05, store).a * 10 + 1 <= CHI2_2
    assert scan_distortion(kstar, ar, member, store, 0.05, 0.01, gamma_cap=0.02) is None


def test_distortion_cutoff_validation(summary):
    with pytest.raises(ValueError):
        distortion_cutoff(ThetaGrid.parse("0:1:0.5,0:1:0.5"), summary, gamma_min=0.0005)


# ---------------------------------------------------------------------------
# instrument selection


def _builder(summary):
    def build(subset):
        idx = list(subset)
        rows = np.concatenate([np.arange(summary.J)[idx] + k * summary.J for k in range(summary.K)])
        return MultivariableSummary(
            summary.Gamma_hat[idx], summary.gamma_hat[idx], summary.Sigma_Gamma[np.ix_(idx, idx)],
            summary.Sigma_gamma[np.ix_(rows, rows)], summary.n_X, summary.n_Y,
        )
    return build


def test_selection_dominance_and_ties(rng):
    from mvmr_weakiv.simulation import SimulationConfig, simulate_dataset

    weak = simulate_dataset(SimulationConfig(mu=2, xi=0.1), 0).summary
    strong = simulate_dataset(SimulationConfig(mu=60, xi=1), 0).summary
    pool = {0: weak, 1: strong}
    grid = ThetaGrid.parse("-2:2:0.04,-2:2:0.04")
    cands = [[0], [1, 1]]
    a = select_instruments(cands, lambda sub: pool[sub[0]], "max_min_condf")
    b = select_instruments(cands, lambda sub: pool[sub[0]], "min_distortion", grid=grid)
    assert a.chosen == b.chosen == 1
    assert a.scores[1] > a.scores[0] and b.scores[1] < b.scores[0]
    build = _builder(random_summary(rng, J=6, K=2))
    assert select_instruments([[0, 1, 2], [0, 1, 2]], build, "max_min_condf").chosen == 0
    # equal scores: fewer instruments first
    same = select_instruments([[0, 1, 2, 0], [0, 1, 2]], lambda sub: build(sorted(set(sub))), "max_min_condf")
    assert same.chosen == 1


def test_selection_failures(summary):
    def broken(subset):
        raise ValueError("cannot build")
    with pytest.raises(ValueError, match="no candidate"):
        select_instruments([[0, 1]], broken, "max_min_condf")
    with pytest.raises(ValueError):
        select_instruments([[0, 1]], _builder(summary), "bogus")
