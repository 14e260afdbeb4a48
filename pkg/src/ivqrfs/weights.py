"""Per-observation density weights from a sparsity difference quotient.

The weighted first stage needs an estimate of the conditional density of the
quantile-centered error at zero for each observation.  Following the
difference-quotient approach, two grid-search fits at ``tau + h`` and
``tau - h`` bracket the quantile of interest, and the weight for observation
``i`` is ``2 h / (s_i' (theta(tau+h) - theta(tau-h)))`` with
``s_i = (d_i, x_i, z_i)`` and the stacked coefficient vector
``theta = (alpha, beta', gamma')'``.

Finite samples can cross quantiles, so the raw quotients need guarding before
they can serve as regression weights.  A nonpositive quotient means the fitted
quantile planes crossed at that observation and carry no density information
there, so the observation takes the median of the well-signed quotients
rather than being dropped; a huge quotient comes from a near-zero spacing and
is capped at a fixed multiple of that median so no single observation can
dominate the weighted design matrix.  Both guards collapse to the absolute
floor and cap when no well-signed quotient exists.  The count of clipped
observations is reported on the result rather than hidden.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .ivqr import DEFAULT_GRID, AlphaGrid, fit_ivqr, weighting_matrix
from .stats_core import norm_pdf, norm_quantile

WEIGHT_FLOOR = 1e-6
WEIGHT_CAP = 1e3
# Largest admissible ratio of a weight to the sample median weight.  The
# sandwich covariance needs no single observation to dominate the weighted
# design; raw quotients near a sign crossing can exceed the median by four
# orders of magnitude, far beyond any plausible conditional-density spread.
WEIGHT_SPREAD_LIMIT = 5.0


@dataclass(frozen=True)
class WeightVector:
    """Estimated density weights at one quantile.

    ``values`` lie in ``[WEIGHT_FLOOR, WEIGHT_CAP]``; ``clipped_count`` is the
    number of observations whose raw quotient was nonpositive or above the
    effective cap (see module docstring), and ``bandwidth`` is the step used
    for the two side fits.
    """

    tau: float
    bandwidth: float
    values: np.ndarray
    clipped_count: int


def hall_sheather_bandwidth(tau: float, n: int) -> float:
    """Bandwidth for the sparsity quotient, scaled for this estimator.

    ``h = 2 n^(-1/3) q(0.975)^(2/3) [ (3/2) pdf(q(tau))^4 / (2 q(tau)^2 + 1) ]^(1/3)``
    with normal quantile ``q`` and density ``pdf``, then clamped so that
    ``tau +- h`` stays inside (0.001, 0.999).  For quantiles too extreme for
    that clamp, half the distance to the nearer boundary is used.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be inside (0, 1), got {tau}")
    n = int(n)
    if n < 2:
        raise ValueError(f"need at least 2 observations, got {n}")
    qt = norm_quantile(tau)
    core = 1.5 * norm_pdf(qt) ** 4 / (2.0 * qt * qt + 1.0)
    h = 2.0 * n ** (-1.0 / 3.0) * norm_quantile(0.975) ** (2.0 / 3.0) * core ** (1.0 / 3.0)
    h = min(h, tau - 1e-3, 1.0 - 1e-3 - tau)
    if h <= 0.0:
        h = 0.5 * min(tau, 1.0 - tau)
    return float(h)


def _quotient_weights(den: np.ndarray, h: float) -> tuple[np.ndarray, int]:
    """Guard raw quotients 2h/den, counting how many observations were touched.

    Quotients outside the trust region (0, WEIGHT_SPREAD_LIMIT * median of
    the positive quotients] take the median: dropping crossed observations
    would delete a block selected by the regressand, and keeping near-zero
    spacings would hand single observations an outsized share of the weighted
    fit.  With no finite positive quotient at all the guards fall back to the
    absolute floor and cap; a zero denominator diverges and lands on the cap.
    """
    with np.errstate(divide="ignore"):
        raw = np.where(den == 0.0, np.inf, 2.0 * h / den)
    low = raw <= 0.0
    finite_pos = raw[np.isfinite(raw) & (raw > 0.0)]
    if finite_pos.size:
        center = min(float(np.median(finite_pos)), WEIGHT_CAP)
        high = raw > max(WEIGHT_SPREAD_LIMIT * center, WEIGHT_FLOOR)
        values = np.where(low | high, center, raw)
    else:
        high = raw > WEIGHT_CAP
        values = np.where(low, WEIGHT_FLOOR, np.where(high, WEIGHT_CAP, raw))
    values = np.clip(values, WEIGHT_FLOOR, WEIGHT_CAP)
    return values, int(np.count_nonzero(low) + np.count_nonzero(high))


def sparsity_weights(data: Dataset, tau: float, grid: AlphaGrid = DEFAULT_GRID,
                     a_mode="identity") -> WeightVector:
    """Estimate density weights at tau via two side fits at tau +- h.

    Both side fits reuse the same grid and the same norm-weighting matrix so
    the bracketing estimates are comparable; for "inverse_gamma_cov" the
    matrix is fixed by a fit at the central tau first.

    Warns
    -----
    RuntimeWarning
        When more than 10% of the quotients had to be clipped.
    """
    h = hall_sheather_bandwidth(tau, data.n)
    if isinstance(a_mode, str) and a_mode == "inverse_gamma_cov":
        a_fixed = fit_ivqr(data, tau, grid, a_mode).A
    elif isinstance(a_mode, str) and a_mode == "identity":
        a_fixed = weighting_matrix("identity", size=data.p)
    else:
        a_fixed = a_mode
    hi = fit_ivqr(data, tau + h, grid, a_fixed)
    lo = fit_ivqr(data, tau - h, grid, a_fixed)
    dtheta = np.concatenate(
        [
            [hi.alpha_hat - lo.alpha_hat],
            hi.beta_hat - lo.beta_hat,
            hi.gamma_hat - lo.gamma_hat,
        ]
    )
    values, clipped = _quotient_weights(data.s() @ dtheta, h)
    if clipped > 0.10 * data.n:
        warnings.warn(
            f"{clipped} of {data.n} sparsity quotients were clipped; the "
            "density estimates are unreliable at this quantile",
            RuntimeWarning,
            stacklevel=2,
        )
    return WeightVector(tau=float(tau), bandwidth=h, values=values, clipped_count=clipped)
