"""Weighted first-stage projection and instrument relevance tests.

The projection regresses the endogenous variable on the exogenous
covariates and the instruments by weighted least squares.  Two weight
regimes share one code path: unit weights give the classical 2SLS first
stage, while density weights (true or estimated, see :mod:`.weights`)
give the design-adapted projection whose fit determines whether the
instruments still move the endogenous variable where the quantile of
interest lives.

Instrument relevance is assessed by a Wald test on a subvector of the
instrument coefficients, using a heteroskedasticity-robust sandwich
covariance.  The test deliberately refuses to consume every instrument
at once: identification downstream needs at least one instrument left
out of the tested block, and the refusal is loud rather than silent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .dataset import Dataset
from .stats_core import EstimationError, chisq_sf, solve_wls
from .weights import WeightVector

__all__ = [
    "FirstStageResult",
    "WaldTest",
    "JacobianReport",
    "fit_first_stage",
    "sandwich_cov",
    "wald_test",
    "jacobian_diagnostics",
]


def _weight_values(weights, n: int) -> tuple[np.ndarray, object]:
    """Normalize the weight argument to a value vector plus a record.

    ``None`` means unit weights (the 2SLS regime); a ``WeightVector``
    contributes its values; a bare array is accepted for injected
    weights such as closed-form densities in simulations.
    """
    if weights is None:
        return np.ones(n), "unit"
    if isinstance(weights, WeightVector):
        values = np.asarray(weights.values, dtype=float)
    else:
        values = np.asarray(weights, dtype=float).ravel()
    if values.shape != (n,):
        raise ValueError(f"weights must have length {n}, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("weights must be finite")
    if np.any(values < 0.0):
        raise ValueError("weights must be nonnegative")
    if not np.any(values > 0.0):
        raise ValueError("weights must not be identically zero")
    return values, weights


@dataclass(frozen=True)
class FirstStageResult:
    """Fitted weighted first-stage projection for one endogenous column.

    Attributes
    ----------
    tau : float or None
        Quantile level the weights were built for; ``None`` for the
        unit-weight (2SLS) regime and for injected weight vectors that
        carry no level.
    mu_hat : ndarray, shape (k + p,)
        Coefficients on ``[x, z]``, exogenous block first.
    k : int
        Number of exogenous columns; splits ``mu_hat``.
    cov : ndarray, shape (k + p, k + p)
        Sandwich covariance of ``mu_hat`` (the asymptotic matrix divided
        by n), so standard errors are ``sqrt(diag(cov))``.
    residuals : ndarray, shape (n,)
        ``d - W mu_hat``.
    weights_used : WeightVector, ndarray, or "unit"
        The weight argument as received, for audit trails.
    w_matrix : ndarray, shape (n, k + p)
        The design ``[x, z]``; kept for covariance recomputation and
        downstream tests.
    weight_values : ndarray, shape (n,)
        The resolved per-observation weights.
    names : tuple of str
        Column labels for ``mu_hat``, exogenous block first.
    """

    tau: float | None
    mu_hat: np.ndarray
    k: int
    cov: np.ndarray
    residuals: np.ndarray
    weights_used: object
    w_matrix: np.ndarray
    weight_values: np.ndarray
    names: tuple[str, ...]

    @property
    def p(self) -> int:
        return self.mu_hat.shape[0] - self.k

    @property
    def psi_hat(self) -> np.ndarray:
        """Exogenous-covariate coefficients."""
        return self.mu_hat[: self.k]

    @property
    def delta_hat(self) -> np.ndarray:
        """Instrument coefficients."""
        return self.mu_hat[self.k :]


@dataclass(frozen=True)
class WaldTest:
    """Wald test of zero restrictions on instrument coefficients."""

    statistic: float
    dof: int
    p_value: float
    tested_indices: tuple[int, ...]


@dataclass(frozen=True)
class JacobianReport:
    """Rank and relevance diagnostics for the weighted moment Jacobian.

    ``rank_dz`` and ``rank_zz`` are numerical ranks (singular values
    above 1e-8 of the largest).  ``zero_dz_columns`` lists columns of
    the instrument-endogenous cross moment that are statistically
    indistinguishable from zero at the 1% level, which is a sharper
    relevance check than numerical rank: a sample moment is never
    exactly zero, only small relative to its own sampling noise.
    ``identity_residual`` reports how well the cross moment equals the
    instrument Gram times the projection coefficients; without
    exogenous covariates this is the WLS normal equation and must hold
    to machine precision.
    """

    rank_dz: int
    rank_zz: int
    full_instrument_rank: bool
    zero_dz_columns: tuple[int, ...]
    identity_residual: float | None


def _sandwich(w: np.ndarray, fvals: np.ndarray, resid: np.ndarray,
              small_sample: bool) -> np.ndarray:
    """Robust covariance V = G^{-1} S G^{-1} of sqrt(n)(mu_hat - mu).

    G is the weighted Gram (1/n) sum f_i w_i w_i' and S the score outer
    moment (1/n) sum f_i^2 e_i^2 w_i w_i'.
    """
    n, q = w.shape
    gram = (w * fvals[:, None]).T @ w / n
    score = w * (fvals * resid)[:, None]
    meat = score.T @ score / n
    try:
        cf = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise EstimationError("weighted Gram matrix is singular") from exc
    v = linalg.cho_solve(cf, linalg.cho_solve(cf, meat).T)
    if small_sample:
        if n <= q:
            raise EstimationError(
                f"small-sample correction needs n > {q} columns, got n={n}"
            )
        v = v * (n / (n - q))
    return 0.5 * (v + v.T)


def fit_first_stage(
    data: Dataset,
    weights: WeightVector | np.ndarray | None = None,
    endog: int = 0,
) -> FirstStageResult:
    """Project one endogenous column on ``[x, z]`` by weighted least squares.

    Parameters
    ----------
    data : Dataset
    weights : WeightVector, ndarray, or None
        Per-observation weights; ``None`` selects unit weights, which
        reproduces the ordinary 2SLS first stage exactly.
    endog : int
        Column of ``data.d`` to project; systems with several
        endogenous variables are handled one column at a time.

    Raises
    ------
    RankDeficiencyError
        If ``[x, z]`` is collinear under the given weights; the message
        names the offending columns.
    """
    if not 0 <= endog < data.r:
        raise ValueError(f"endog must be in [0, {data.r}), got {endog}")
    fvals, record = _weight_values(weights, data.n)
    w = data.w()
    if data.names is not None:
        names = list(data.names.exogenous + data.names.instruments)
    else:
        names = None
    d = data.d[:, endog]
    mu_hat = solve_wls(w, fvals, d, names=names)
    resid = d - w @ mu_hat
    cov = _sandwich(w, fvals, resid, small_sample=False) / data.n
    tau = weights.tau if isinstance(weights, WeightVector) else None
    return FirstStageResult(
        tau=tau,
        mu_hat=mu_hat,
        k=data.k,
        cov=cov,
        residuals=resid,
        weights_used=record,
        w_matrix=w,
        weight_values=fvals,
        names=tuple(names) if names is not None else tuple(
            f"c{j}" for j in range(w.shape[1])
        ),
    )


def sandwich_cov(result: FirstStageResult, small_sample: bool = False) -> np.ndarray:
    """Recompute the sandwich covariance of sqrt(n)(mu_hat - mu).

    Returns the asymptotic matrix, i.e. ``n * result.cov`` for the
    default regime.  ``small_sample=True`` applies the n/(n - q)
    degrees-of-freedom inflation used in finite-sample comparisons.
    """
    return _sandwich(
        result.w_matrix, result.weight_values, result.residuals, small_sample
    )


def wald_test(
    result: FirstStageResult,
    tested_indices,
    enforce_overidentification: bool = True,
) -> WaldTest:
    """Wald test of H0: the tested instrument coefficients are all zero.

    ``tested_indices`` index into the instrument block (positions within
    ``delta_hat``).  By default the full set of instruments cannot be
    tested at once: rejecting relevance of every instrument leaves the
    structural stage unidentified, so at least one instrument must stay
    out of the tested block.  Pass ``enforce_overidentification=False``
    only when that downstream concern does not apply, e.g. when probing
    a just-identified design in isolation.

    Raises
    ------
    ValueError
        On empty, duplicate, or out-of-range indices, or when all
        instruments are tested while enforcement is on.
    EstimationError
        If the covariance of the tested block is singular.
    """
    idx = np.atleast_1d(np.asarray(tested_indices, dtype=int)).ravel()
    p = result.p
    if idx.size == 0:
        raise ValueError("tested_indices must name at least one instrument")
    if np.unique(idx).size != idx.size:
        raise ValueError("tested_indices contains duplicates")
    if np.any(idx < 0) or np.any(idx >= p):
        raise ValueError(f"tested_indices must lie in [0, {p})")
    if enforce_overidentification and idx.size >= p:
        raise ValueError(
            "refusing to test every instrument at once: identification "
            "requires at least one instrument outside the tested block "
            "(over-identification); drop an index or pass "
            "enforce_overidentification=False"
        )
    rows = result.k + idx
    delta = result.mu_hat[rows]
    block = result.cov[np.ix_(rows, rows)]
    try:
        cf = linalg.cho_factor(block)
    except linalg.LinAlgError as exc:
        raise EstimationError(
            "covariance of the tested coefficients is singular"
        ) from exc
    statistic = float(delta @ linalg.cho_solve(cf, delta))
    statistic = max(statistic, 0.0)
    dof = int(idx.size)
    return WaldTest(
        statistic=statistic,
        dof=dof,
        p_value=chisq_sf(statistic, dof),
        tested_indices=tuple(int(i) for i in idx),
    )


def _statistically_zero_columns(z: np.ndarray, d: np.ndarray,
                                fvals: np.ndarray) -> tuple[int, ...]:
    """Columns j of (1/n) sum f_i z_i d_ij indistinguishable from zero.

    Each column mean is compared against its own estimated sampling
    covariance through a chi-square statistic; failure to reject at the
    1% level flags the column.
    """
    n, p = z.shape
    flagged = []
    for j in range(d.shape[1]):
        g = z * (fvals * d[:, j])[:, None]
        gbar = g.mean(axis=0)
        # covariance of the mean; ddof=1 matches np.cov
        s = np.cov(g.T, ddof=1) / n
        s = np.atleast_2d(s)
        try:
            stat = float(gbar @ linalg.solve(s, gbar, assume_a="pos"))
        except (linalg.LinAlgError, ValueError):
            stat = float(gbar @ np.linalg.pinv(s) @ gbar)
        if chisq_sf(max(stat, 0.0), p) > 0.01:
            flagged.append(j)
    return tuple(flagged)


def jacobian_diagnostics(
    data: Dataset,
    weights: WeightVector | np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, JacobianReport]:
    """Weighted moment Jacobian blocks and their rank diagnostics.

    Returns ``(dz, zz, report)`` where ``dz = (1/n) sum f_i z_i d_i'``
    is p-by-r and ``zz = (1/n) sum f_i z_i z_i'`` is p-by-p.  Full rank
    of ``zz`` and at least one nonzero column of ``dz`` are necessary
    for the instruments to identify the structural coefficients; the
    report carries both checks.
    """
    fvals, _ = _weight_values(weights, data.n)
    z = data.z
    d = data.d
    n = data.n
    dz = z.T @ (d * fvals[:, None]) / n
    zz = (z * fvals[:, None]).T @ z / n

    sv_dz = np.linalg.svd(dz, compute_uv=False)
    sv_zz = np.linalg.svd(zz, compute_uv=False)
    rank_dz = int(np.sum(sv_dz > 1e-8 * sv_dz.max())) if sv_dz.max() > 0 else 0
    rank_zz = int(np.sum(sv_zz > 1e-8 * sv_zz.max())) if sv_zz.max() > 0 else 0

    zero_cols = _statistically_zero_columns(z, d, fvals)

    identity_residual = None
    if data.k == 0:
        # with no exogenous block the projection normal equations read
        # zz @ delta_hat = dz exactly, column by column
        worst = 0.0
        for j in range(data.r):
            delta = solve_wls(z, fvals, d[:, j])
            gap = np.max(np.abs(dz[:, j] - zz @ delta))
            worst = max(worst, float(gap))
        identity_residual = worst

    report = JacobianReport(
        rank_dz=rank_dz,
        rank_zz=rank_zz,
        full_instrument_rank=rank_zz == data.p,
        zero_dz_columns=zero_cols,
        identity_residual=identity_residual,
    )
    return dz, zz, report
