"""Tests for the weighted first-stage projection and Wald relevance test."""

import numpy as np
import pytest

from ivqrfs.dataset import Dataset
from ivqrfs.first_stage import (
    FirstStageResult,
    fit_first_stage,
    jacobian_diagnostics,
    sandwich_cov,
    wald_test,
)
from ivqrfs.stats_core import EstimationError, RankDeficiencyError, chisq_sf
from ivqrfs.weights import WeightVector

from oracles import dgp_sample

# chi-square survival values frozen from scipy.stats.chi2.sf
CHI2_SF_4_1 = 0.04550026389635857
# asymptotic 1% Kolmogorov-Smirnov critical constant
KS_CRIT_1PCT = 1.6276
PHI0 = 1.0 / np.sqrt(2.0 * np.pi)


def _dataset(n, a, b, phi, seed):
    y, d, x, z1, z2 = dgp_sample(n, a=a, b=b, phi=phi, seed=seed)
    return Dataset(
        y=y,
        d=d[:, None],
        x=np.column_stack([np.ones(n), x]),
        z=np.column_stack([z1, z2]),
    )


def _manual_result(mu_hat, k, cov, n=8):
    """Hand-built result for tests that only exercise wald_test."""
    q = len(mu_hat)
    return FirstStageResult(
        tau=None,
        mu_hat=np.asarray(mu_hat, dtype=float),
        k=k,
        cov=np.asarray(cov, dtype=float),
        residuals=np.zeros(n),
        weights_used="unit",
        w_matrix=np.ones((n, q)),
        weight_values=np.ones(n),
        names=tuple(f"c{j}" for j in range(q)),
    )


# ---------------------------------------------------------------------------
# fitting


def test_unit_weights_match_least_squares():
    ds = _dataset(400, 1.0, 0.5, 1.0, seed=11)
    res = fit_first_stage(ds)
    mu_lstsq, *_ = np.linalg.lstsq(ds.w(), ds.d[:, 0], rcond=None)
    assert np.max(np.abs(res.mu_hat - mu_lstsq)) <= 1e-12
    assert res.weights_used == "unit"
    assert res.tau is None
    assert np.all(res.weight_values == 1.0)


def test_constant_weights_match_unit_exactly():
    ds = _dataset(400, 1.0, 0.5, 1.0, seed=11)
    unit = fit_first_stage(ds)
    const = fit_first_stage(ds, weights=np.full(ds.n, 7.0))
    assert np.max(np.abs(const.mu_hat - unit.mu_hat)) <= 1e-12
    assert np.max(np.abs(const.cov - unit.cov)) <= 1e-12


def test_square_design_interpolates_exactly():
    # n = k + p: the projection passes through every point
    d3 = np.array([2.0, -1.0, 0.7])
    ds = Dataset(
        y=d3.copy(),
        d=d3[:, None],
        x=np.array([[1.0, 0.3], [1.0, -0.2], [1.0, 0.9]]),
        z=np.array([[0.5], [1.5], [-0.4]]),
    )
    res = fit_first_stage(ds)
    assert np.max(np.abs(res.residuals)) <= 1e-12
    # zero residuals collapse the sandwich to the zero matrix
    assert np.max(np.abs(res.cov)) <= 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("mode", ["unit", "vector"])
def test_weighted_normal_equations_hold(seed, mode):
    ds = _dataset(300, 1.0, 0.5, 1.0, seed=seed)
    if mode == "unit":
        res = fit_first_stage(ds)
    else:
        rng = np.random.default_rng(seed)
        res = fit_first_stage(ds, weights=rng.uniform(0.1, 2.0, size=ds.n))
    score = ds.w().T @ (res.weight_values * res.residuals)
    scale = ds.n * max(1.0, np.max(np.abs(ds.d)))
    assert np.max(np.abs(score)) <= 1e-8 * scale


def test_covariance_is_symmetric_psd():
    ds = _dataset(500, 1.0, 0.5, 1.0, seed=3)
    res = fit_first_stage(ds)
    assert np.array_equal(res.cov, res.cov.T)
    eig = np.linalg.eigvalsh(res.cov)
    assert eig.min() >= -1e-12 * max(eig.max(), 1.0)


def test_result_splits_and_metadata():
    ds = _dataset(200, 1.0, 0.5, 1.0, seed=4)
    wv = WeightVector(
        tau=0.3, bandwidth=0.05, values=np.full(ds.n, 2.0), clipped_count=0
    )
    res = fit_first_stage(ds, weights=wv)
    assert res.tau == 0.3
    assert res.weights_used is wv
    assert res.psi_hat.shape == (ds.k,)
    assert res.delta_hat.shape == (ds.p,)
    assert np.array_equal(np.concatenate([res.psi_hat, res.delta_hat]), res.mu_hat)
    assert res.names == ("x1", "x2", "z1", "z2")


def test_weight_argument_validation():
    ds = _dataset(50, 1.0, 0.0, 1.0, seed=5)
    with pytest.raises(ValueError, match="length"):
        fit_first_stage(ds, weights=np.ones(10))
    with pytest.raises(ValueError, match="nonnegative"):
        fit_first_stage(ds, weights=-np.ones(ds.n))
    with pytest.raises(ValueError, match="finite"):
        fit_first_stage(ds, weights=np.full(ds.n, np.nan))
    with pytest.raises(ValueError, match="identically zero"):
        fit_first_stage(ds, weights=np.zeros(ds.n))
    with pytest.raises(ValueError, match="endog"):
        fit_first_stage(ds, endog=1)


def test_collinear_columns_are_named():
    rng = np.random.default_rng(5)
    n = 200
    z1 = rng.normal(size=n)
    z = np.column_stack([z1, z1, rng.normal(size=n)])
    d = z1 + rng.normal(size=n)
    ds = Dataset(y=d.copy(), d=d[:, None], x=np.ones((n, 1)), z=z)
    with pytest.raises(RankDeficiencyError, match="z"):
        fit_first_stage(ds)


# ---------------------------------------------------------------------------
# sandwich covariance


def test_sandwich_cov_scales_result_cov():
    ds = _dataset(400, 1.0, 0.5, 1.0, seed=6)
    res = fit_first_stage(ds)
    v = sandwich_cov(res)
    assert np.allclose(v / ds.n, res.cov, rtol=1e-14, atol=0.0)
    v1 = sandwich_cov(res, small_sample=True)
    q = res.mu_hat.shape[0]
    assert np.allclose(v1, v * ds.n / (ds.n - q), rtol=1e-14, atol=0.0)


def test_homoskedastic_sandwich_matches_ols_formula():
    # with iid noise the robust diagonal must track sigma^2 (W'W)^{-1}
    rng = np.random.default_rng(21)
    n = 2000
    w1 = rng.normal(size=n)
    w2 = rng.uniform(size=n)
    big_w = np.column_stack([np.ones(n), w1, w2])
    sigma = 1.3
    d = big_w @ np.array([2.0, 1.0, -1.0]) + sigma * rng.normal(size=n)
    ds = Dataset(
        y=d.copy(),
        d=d[:, None],
        x=np.column_stack([np.ones(n), w1]),
        z=w2[:, None],
    )
    res = fit_first_stage(ds)
    ols_cov = sigma**2 * np.linalg.inv(big_w.T @ big_w)
    ratio = np.diag(res.cov) / np.diag(ols_cov)
    assert np.all(np.abs(ratio - 1.0) <= 0.2)


def test_sandwich_tracks_pairs_bootstrap():
    # heteroskedastic design with every covariance entry away from zero,
    # so the entrywise comparison is meaningful
    rng = np.random.default_rng(33)
    n = 500
    u1 = rng.uniform(size=n)
    z1 = 0.8 + 0.4 * u1
    z2 = 0.2 + 0.6 * z1 + 0.3 * rng.uniform(size=n)
    z = np.column_stack([z1, z2])
    d = z @ np.array([1.0, 0.5]) + (0.4 + 0.8 * u1) * rng.normal(size=n)
    ds = Dataset(y=d.copy(), d=d[:, None], x=np.empty((n, 0)), z=z)
    res = fit_first_stage(ds)
    boots = np.empty((500, 2))
    for b in range(500):
        ii = rng.integers(0, n, size=n)
        boots[b] = np.linalg.lstsq(z[ii], d[ii], rcond=None)[0]
    boot_cov = np.cov(boots.T, ddof=1)
    ratio = res.cov / boot_cov
    assert ratio.min() >= 0.7
    assert ratio.max() <= 1.4


# ---------------------------------------------------------------------------
# Wald test


def test_wald_scalar_textbook_value():
    res = _manual_result(
        mu_hat=[0.1, 0.2, 0.0],
        k=1,
        cov=np.diag([1.0, 0.01, 1.0]),
    )
    t = wald_test(res, [0])
    assert t.statistic == pytest.approx(4.0, rel=1e-12)
    assert t.dof == 1
    assert t.p_value == pytest.approx(CHI2_SF_4_1, abs=1e-12)
    assert t.tested_indices == (0,)


def test_wald_zero_coefficients_give_unit_p_value():
    res = _manual_result(
        mu_hat=[0.5, 0.0, 0.3],
        k=1,
        cov=np.diag([1.0, 0.04, 0.09]),
    )
    t = wald_test(res, [0])
    assert t.statistic == 0.0
    assert t.p_value == 1.0


def test_wald_refuses_testing_every_instrument():
    ds = _dataset(300, 1.0, 0.0, 1.0, seed=7)
    res = fit_first_stage(ds)
    with pytest.raises(ValueError, match="over-identif"):
        wald_test(res, [0, 1])
    # explicit opt-out for just-identified probes
    t = wald_test(res, [0, 1], enforce_overidentification=False)
    assert t.dof == 2
    assert 0.0 <= t.p_value <= 1.0
    assert t.statistic >= 0.0


def test_wald_index_validation():
    ds = _dataset(100, 1.0, 0.0, 1.0, seed=8)
    res = fit_first_stage(ds)
    with pytest.raises(ValueError, match="at least one"):
        wald_test(res, [])
    with pytest.raises(ValueError, match="duplicates"):
        wald_test(res, [0, 0], enforce_overidentification=False)
    with pytest.raises(ValueError, match=r"\[0, 2\)"):
        wald_test(res, [5])
    with pytest.raises(ValueError, match=r"\[0, 2\)"):
        wald_test(res, [-1])


def test_wald_singular_block_raises():
    res = _manual_result(
        mu_hat=[0.0, 0.2, 0.2, 0.1],
        k=1,
        cov=np.block([
            [np.eye(2), np.zeros((2, 2))],
            [np.zeros((2, 2)), np.ones((2, 2))],  # singular tested block
        ]),
    )
    with pytest.raises(EstimationError, match="singular"):
        wald_test(res, [1, 2], enforce_overidentification=False)


def test_wald_invariant_to_instrument_and_weight_scaling():
    ds = _dataset(400, 1.0, 0.5, 1.0, seed=11)
    base = wald_test(fit_first_stage(ds), [0])
    scaled = Dataset(y=ds.y, d=ds.d, x=ds.x, z=ds.z * np.array([37.5, 1.0]))
    t_scaled = wald_test(fit_first_stage(scaled), [0])
    assert t_scaled.statistic == pytest.approx(base.statistic, rel=1e-8)
    t_w = wald_test(fit_first_stage(ds, weights=np.full(ds.n, 0.123)), [0])
    assert t_w.statistic == pytest.approx(base.statistic, rel=1e-8)


@pytest.mark.slow
def test_null_wald_distribution_matches_chisq1():
    # a = 0 makes z1 irrelevant while z2 keeps identification alive;
    # T_n for H0: delta_1 = 0 must then be chi-square with 1 dof.
    # Run the unit-weight regime and a closed-form density-weight regime
    # through the same pipeline.
    reps = 2000
    n = 1000
    stats = {"unit": np.empty(reps), "density": np.empty(reps)}
    for rep in range(reps):
        y, d, x, z1, z2 = dgp_sample(n, a=0.0, b=0.0, phi=1.0, seed=500_000 + rep)
        ds = Dataset(
            y=y,
            d=d[:, None],
            x=np.column_stack([np.ones(n), x]),
            z=np.column_stack([z1, z2]),
        )
        stats["unit"][rep] = wald_test(fit_first_stage(ds), [0]).statistic
        dens = PHI0 / ((1.0 + d) * np.sqrt(0.75))
        stats["density"][rep] = wald_test(
            fit_first_stage(ds, weights=dens), [0]
        ).statistic
    crit = KS_CRIT_1PCT / np.sqrt(reps)
    for name, sample in stats.items():
        grid = np.sort(sample)
        ecdf_hi = np.arange(1, reps + 1) / reps
        cdf = 1.0 - np.array([chisq_sf(s, 1) for s in grid])
        dist = max(
            np.max(np.abs(ecdf_hi - cdf)),
            np.max(np.abs(ecdf_hi - 1.0 / reps - cdf)),
        )
        assert dist < crit, f"{name}: KS distance {dist:.4f} >= {crit:.4f}"
        rej = np.mean([chisq_sf(s, 1) for s in sample] < np.float64(0.05))
        assert 0.03 <= rej <= 0.07, f"{name}: size {rej:.4f}"


# ---------------------------------------------------------------------------
# jacobian diagnostics


def test_jacobian_flags_irrelevant_instruments():
    # d independent of both centered instruments: the cross moment is
    # statistically zero even though its numerical rank is still one
    rng = np.random.default_rng(77)
    n = 2000
    z = np.column_stack(
        [rng.uniform(-0.5, 0.5, size=n), rng.uniform(-0.5, 0.5, size=n)]
    )
    d = 10.0 + rng.normal(size=n)
    ds = Dataset(y=d.copy(), d=d[:, None], x=np.empty((n, 0)), z=z)
    dz, zz, report = jacobian_diagnostics(ds)
    assert dz.shape == (2, 1)
    assert zz.shape == (2, 2)
    assert report.zero_dz_columns == (0,)
    assert report.rank_dz == 1
    assert report.full_instrument_rank
    assert report.identity_residual is not None
    assert report.identity_residual < 1e-10


def test_jacobian_clean_on_relevant_design():
    rng = np.random.default_rng(1000)
    n = 800
    z = np.column_stack(
        [rng.uniform(-0.5, 0.5, size=n), rng.uniform(-0.5, 0.5, size=n)]
    )
    d = z[:, 0] + rng.normal(size=n)
    ds = Dataset(y=d.copy(), d=d[:, None], x=np.empty((n, 0)), z=z)
    dz, zz, report = jacobian_diagnostics(ds)
    assert report.zero_dz_columns == ()
    assert report.rank_dz == 1
    assert report.rank_zz == 2
    assert report.identity_residual < 1e-10


def test_jacobian_moments_match_direct_sums():
    ds = _dataset(60, 1.0, 0.5, 1.0, seed=13)
    rng = np.random.default_rng(13)
    f = rng.uniform(0.5, 1.5, size=ds.n)
    dz, zz, report = jacobian_diagnostics(ds, weights=f)
    dz_direct = np.zeros_like(dz)
    zz_direct = np.zeros_like(zz)
    for i in range(ds.n):
        dz_direct += f[i] * np.outer(ds.z[i], ds.d[i])
        zz_direct += f[i] * np.outer(ds.z[i], ds.z[i])
    assert np.allclose(dz, dz_direct / ds.n, rtol=1e-12)
    assert np.allclose(zz, zz_direct / ds.n, rtol=1e-12)
    # exogenous covariates present: the normal-equation identity is not
    # applicable and must be reported as such
    assert report.identity_residual is None
