"""Scalar distributions, seedable random streams, and small dense solvers.

Everything downstream (quantile fits, weighted projections, simulation
drivers) builds on the handful of primitives collected here.  Matrices are
plain ``numpy`` arrays in row-major order; no wrapper types.  All functions
are pure, so they are safe to call from concurrent simulation workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "EstimationError",
    "RankDeficiencyError",
    "RngStream",
    "norm_pdf",
    "norm_cdf",
    "norm_quantile",
    "chisq_sf",
    "chisq_cdf",
    "bivariate_normal_sample",
    "solve_wls",
]

_SQRT_2PI = np.sqrt(2.0 * np.pi)

# Reciprocal-condition threshold below which a normal matrix is treated as
# rank deficient.  Double precision carries ~1e-16 of relative noise, so
# 1e-12 leaves a safety margin of four orders of magnitude.
RCOND_MIN = 1e-12


class EstimationError(Exception):
    """Base class for numerical estimation failures."""


class RankDeficiencyError(EstimationError):
    """A design or normal matrix is singular to working precision.

    Attributes
    ----------
    columns : list of int
        Indices of the columns implicated in the collinearity.
    """

    def __init__(self, message: str, columns: list[int] | None = None):
        super().__init__(message)
        self.columns = list(columns) if columns is not None else []


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by ``(seed, stream_id)``.

    Each stream is an independent Philox keyspace, so replication ``i`` of a
    simulation can draw from ``RngStream(seed, i)`` on any worker, in any
    order, and reproduce the same numbers bit for bit.

    Parameters
    ----------
    seed : int
        Master seed, 64-bit unsigned.
    stream_id : int
        Stream index, 64-bit unsigned (e.g. the replication number).
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def generator(self) -> np.random.Generator:
        """Return a fresh generator positioned at the start of the stream."""
        key = (int(self.stream_id) << 64) | int(self.seed)
        return np.random.Generator(np.random.Philox(key=key))


def norm_pdf(x):
    """Standard normal density, (2*pi)^(-1/2) * exp(-x^2/2)."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x) / _SQRT_2PI
    return float(out) if out.ndim == 0 else out


def norm_cdf(x):
    """Standard normal cumulative distribution function."""
    x = np.asarray(x, dtype=float)
    out = special.ndtr(x)
    return float(out) if out.ndim == 0 else out


def norm_quantile(p):
    """Standard normal quantile function (inverse CDF).

    Parameters
    ----------
    p : float or array_like
        Probability strictly inside (0, 1).

    Returns
    -------
    float or ndarray
        Value q with ``norm_cdf(q) = p``.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError(f"probability must lie strictly inside (0, 1), got {p}")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def chisq_sf(x, dof: int):
    """Chi-square survival function P(X > x) for X ~ chi2(dof).

    Evaluated through the regularized upper incomplete gamma function
    Q(dof/2, x/2).

    Parameters
    ----------
    x : float or array_like
        Nonnegative evaluation point.
    dof : int
        Degrees of freedom, at least 1.
    """
    if dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise ValueError("chi-square statistic must be nonnegative")
    out = special.gammaincc(0.5 * dof, 0.5 * x)
    return float(out) if out.ndim == 0 else out


def chisq_cdf(x, dof: int):
    """Chi-square CDF, the complement of :func:`chisq_sf`."""
    if dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise ValueError("chi-square statistic must be nonnegative")
    out = special.gammainc(0.5 * dof, 0.5 * x)
    return float(out) if out.ndim == 0 else out


def bivariate_normal_sample(rng, rho: float, size: int | None = None):
    """Draw (u, v) with standard normal marginals and correlation rho.

    Built from independent standard normals e1, e2 as u = e1 and
    v = rho*e1 + sqrt(1-rho^2)*e2.

    Parameters
    ----------
    rng : RngStream or numpy.random.Generator
        An ``RngStream`` is opened at its start (deterministic replay); a
        ``Generator`` is consumed in place.
    rho : float
        Correlation, |rho| < 1.
    size : int, optional
        Number of pairs; scalar pair when omitted.

    Returns
    -------
    (u, v) : tuple of floats or of ndarrays
    """
    if not abs(rho) < 1.0:
        raise ValueError(f"correlation must satisfy |rho| < 1, got {rho}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    e1 = gen.standard_normal(size)
    e2 = gen.standard_normal(size)
    u = e1
    v = rho * e1 + np.sqrt(1.0 - rho * rho) * e2
    return u, v


def _implicated_columns(m: np.ndarray) -> list[int]:
    """Columns carrying the largest weight in the near-null eigenvector."""
    vals, vecs = np.linalg.eigh(m)
    null_vec = np.abs(vecs[:, 0])
    return [int(j) for j in np.flatnonzero(null_vec > 0.1 * null_vec.max())]


def solve_wls(
    w: np.ndarray,
    weights: np.ndarray,
    d: np.ndarray,
    names: list[str] | None = None,
) -> np.ndarray:
    """Weighted least squares via the normal equations.

    Minimizes ``sum_i weights_i * (d_i - w_i @ mu)**2`` by solving
    ``(W' V W) mu = W' V d`` with ``V = diag(weights)`` through a Cholesky
    factorization.  Problems here are small (q below ~25), so the normal
    equations are preferred over an orthogonal decomposition; conditioning
    is checked explicitly instead.

    Parameters
    ----------
    w : ndarray, shape (n, q)
        Design matrix.
    weights : ndarray, shape (n,)
        Nonnegative observation weights.
    d : ndarray, shape (n,)
        Response vector.
    names : list of str, optional
        Column labels used in rank-deficiency error messages.

    Returns
    -------
    ndarray, shape (q,)
        The WLS coefficient vector.

    Raises
    ------
    RankDeficiencyError
        If the weighted normal matrix has reciprocal condition number below
        1e-12, with the offending columns identified.
    """
    w = np.asarray(w, dtype=float)
    weights = np.asarray(weights, dtype=float)
    d = np.asarray(d, dtype=float)
    n, q = w.shape
    if n < q:
        raise ValueError(f"need at least as many rows as columns, got {n} x {q}")
    if weights.shape != (n,) or d.shape != (n,):
        raise ValueError("weights and response must be length-n vectors")
    if np.any(weights < 0.0):
        raise ValueError("weights must be nonnegative")

    wv = w * weights[:, None]
    m = wv.T @ w
    c = wv.T @ d

    eigvals = np.linalg.eigvalsh(m)
    if eigvals[-1] <= 0.0 or eigvals[0] / eigvals[-1] < RCOND_MIN:
        cols = _implicated_columns(m)
        labels = [names[j] if names else str(j) for j in cols]
        raise RankDeficiencyError(
            "weighted normal matrix is rank deficient (reciprocal condition "
            f"below {RCOND_MIN:g}); collinear columns: {', '.join(labels)}",
            columns=cols,
        )

    from scipy.linalg import cho_factor, cho_solve

    return cho_solve(cho_factor(m, lower=True), c)
