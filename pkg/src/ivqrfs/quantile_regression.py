"""Linear quantile regression by a primal-dual interior point method.

The check-function problem

    min_b (1/n) * sum_i rho_tau(y_i - x_i @ b)

is solved through its bounded-variable LP dual (max y'a subject to
X'a = (1-tau) X'1, 0 <= a <= 1) with Mehrotra-style predictor-corrector
steps.  The solver is written over a batch axis: many response vectors
(and quantile levels) sharing one design matrix are solved simultaneously,
which is what the grid search over the endogenous coefficient needs.

After the interior point iterations a vertex polish identifies the basic
observations (the smallest residuals), refits the implied q x q system
exactly, and keeps the polished solution whenever it does not worsen the
objective.  This restores the interpolation property of quantile
regression: at least q residuals are exactly zero at the solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stats_core import EstimationError, RankDeficiencyError

__all__ = [
    "QuantileFit",
    "QrBatch",
    "ConvergenceError",
    "check_loss",
    "fit_qr",
    "fit_qr_batch",
]

# Fraction of the distance to the positivity boundary taken per step.
_STEP_DAMP = 0.99995

# Cap on batch * n * q elements per internal chunk, to bound the size of
# the (B, n, q) temporaries formed in each iteration (~160 MB of float64).
_CHUNK_ELEMENTS = 20_000_000


@dataclass
class QuantileFit:
    """One quantile regression fit.

    Fields
    ------
    tau : quantile level in (0, 1)
    coefficients : (q,) coefficient vector
    objective : mean check loss at the solution
    iterations : interior point iterations used
    converged : whether the duality gap closed below tolerance
    """

    tau: float
    coefficients: np.ndarray
    objective: float
    iterations: int
    converged: bool


@dataclass
class QrBatch:
    """Array-of-fits result for a batch sharing one design matrix."""

    tau: np.ndarray
    coefficients: np.ndarray
    objective: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    def __len__(self) -> int:
        return self.coefficients.shape[0]

    def fit(self, i: int) -> QuantileFit:
        return QuantileFit(
            tau=float(self.tau[i]),
            coefficients=self.coefficients[i].copy(),
            objective=float(self.objective[i]),
            iterations=int(self.iterations[i]),
            converged=bool(self.converged[i]),
        )


class ConvergenceError(EstimationError):
    """Interior point iterations exhausted before the gap closed.

    Attributes
    ----------
    best : QuantileFit or QrBatch
        Best iterate at the point of failure.
    """

    def __init__(self, message: str, best):
        super().__init__(message)
        self.best = best


def check_loss(u, tau: float):
    """Quantile check loss rho_tau(u) = u * (tau - 1{u < 0})."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie strictly inside (0, 1), got {tau}")
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0.0))
    return float(out) if out.ndim == 0 else out


def _validate_design(x: np.ndarray) -> None:
    n, q = x.shape
    if n <= q:
        raise ValueError(f"need more observations than regressors, got {n} x {q}")
    if not np.all(np.isfinite(x)):
        raise ValueError("design matrix contains non-finite entries")
    _, sv, vh = np.linalg.svd(x, full_matrices=False)
    if sv[0] <= 0.0 or sv[-1] / sv[0] < 1e-12:
        null_vec = np.abs(vh[-1])
        cols = [int(j) for j in np.flatnonzero(null_vec > 0.1 * null_vec.max())]
        raise RankDeficiencyError(
            f"design matrix is rank deficient; collinear columns: {cols}",
            columns=cols,
        )


def _mean_check_loss(resid: np.ndarray, taus: np.ndarray) -> np.ndarray:
    # resid (B, n), taus (B,) -> (B,)
    return np.mean(resid * (taus[:, None] - (resid < 0.0)), axis=1)


def _interior_point(x, ys, taus, tol, max_iter):
    """Core predictor-corrector loop.  ys is (B, n); returns coefs, its, ok."""
    b_size, n = ys.shape
    q = x.shape[1]
    xt = x.T

    c = -ys
    # Scale-aware absolute gap tolerance: tol is per observation.
    gap_tol = tol * n * (1.0 + np.mean(np.abs(ys), axis=1))

    a_primal = np.repeat(1.0 - taus[:, None], n, axis=1)
    s = 1.0 - a_primal

    gram = xt @ x
    coef_dual = np.linalg.solve(gram, (c @ x).T).T
    r = c - coef_dual @ xt
    guard = 1e-6 * (1.0 + np.mean(np.abs(c), axis=1, keepdims=True))
    bump = np.where(np.abs(r) < guard, guard, 0.0)
    z = np.maximum(r, 0.0) + bump
    w = np.maximum(-r, 0.0) + bump

    gap = np.einsum("bn,bn->b", z, a_primal) + np.einsum("bn,bn->b", w, s)
    iterations = np.zeros(b_size, dtype=int)
    # Converged elements are compacted out of the working arrays; `live`
    # maps working rows back to batch positions.
    live = np.flatnonzero(gap > gap_tol)
    out_coef = -coef_dual

    def solve_m(m, rhs):
        try:
            return np.linalg.solve(m, rhs[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            # Some element collapsed onto a degenerate face.  Fall back to
            # per-element solves so a ridge touches only the broken ones.
            out = np.empty_like(rhs)
            for i in range(m.shape[0]):
                try:
                    out[i] = np.linalg.solve(m[i], rhs[i])
                except np.linalg.LinAlgError:
                    ridge = 1e-13 * np.trace(m[i]) * np.eye(q)
                    out[i] = np.linalg.solve(m[i] + ridge, rhs[i])
            return out

    def step_bound(v, dv):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dv < 0.0, -v / dv, np.inf)
        return np.min(ratio, axis=1)

    if live.size:
        a_primal, s, z, w, coef_dual = (v[live] for v in (a_primal, s, z, w, coef_dual))
        gap, gtol = gap[live], gap_tol[live]

    for _ in range(max_iter):
        if not live.size:
            break
        iterations[live] += 1

        zx = z / a_primal
        ws = w / s
        qdiag = 1.0 / (zx + ws)
        m = np.matmul(xt[None, :, :], qdiag[:, :, None] * x[None, :, :])

        # Predictor (affine) direction.
        rho = z - w
        dy = solve_m(m, (qdiag * rho) @ x)
        dx = qdiag * (dy @ xt - rho)
        dz = -z - zx * dx
        dw = ws * dx
        dw -= w

        ap = np.minimum(_STEP_DAMP * np.minimum(step_bound(a_primal, dx), step_bound(s, -dx)), 1.0)
        ad = np.minimum(_STEP_DAMP * np.minimum(step_bound(z, dz), step_bound(w, dw)), 1.0)

        # Mehrotra centering from the affine trial point.
        gap_aff = np.einsum("bn,bn->b", a_primal + ap[:, None] * dx, z + ad[:, None] * dz)
        gap_aff += np.einsum("bn,bn->b", s - ap[:, None] * dx, w + ad[:, None] * dw)
        gap_aff = np.maximum(gap_aff, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            mu = np.where(gap > 0.0, gap_aff**3 / gap**2 / (2.0 * n), 0.0)
        mu_col = mu[:, None]

        # Corrector direction, with the affine second-order terms folded in.
        dxa_dza = dx * dz
        dxa_dwa = dx * dw
        rho = z - w + (dxa_dza - mu_col) / a_primal + (dxa_dwa + mu_col) / s
        dy = solve_m(m, (qdiag * rho) @ x)
        dx = qdiag * (dy @ xt - rho)
        dz = (mu_col - dxa_dza) / a_primal
        dz -= z
        dz -= zx * dx
        dw = (mu_col + dxa_dwa) / s
        dw -= w
        dw += ws * dx

        ap = np.minimum(_STEP_DAMP * np.minimum(step_bound(a_primal, dx), step_bound(s, -dx)), 1.0)
        ad = np.minimum(_STEP_DAMP * np.minimum(step_bound(z, dz), step_bound(w, dw)), 1.0)

        ap_col, ad_col = ap[:, None], ad[:, None]
        dx *= ap_col
        a_primal += dx
        s -= dx
        coef_dual += ad_col * dy
        z += ad_col * dz
        w += ad_col * dw

        gap = np.einsum("bn,bn->b", z, a_primal) + np.einsum("bn,bn->b", w, s)
        done = gap <= gtol
        if np.any(done):
            out_coef[live[done]] = -coef_dual[done]
            keep = ~done
            live = live[keep]
            a_primal, s, z, w, coef_dual = (v[keep] for v in (a_primal, s, z, w, coef_dual))
            gap, gtol = gap[keep], gtol[keep]

    if live.size:
        out_coef[live] = -coef_dual

    converged = np.ones(b_size, dtype=bool)
    converged[live] = False
    return out_coef, iterations, converged


def _polish(x, ys, taus, coefs):
    """Refit on the q smallest-residual rows; keep when not worse."""
    b_size, n = ys.shape
    q = x.shape[1]
    resid = ys - coefs @ x.T
    obj = _mean_check_loss(resid, taus)

    basis = np.argsort(np.abs(resid), axis=1)[:, :q]
    xb = x[basis]
    yb = np.take_along_axis(ys, basis, axis=1)

    sv = np.linalg.svd(xb, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        good = (sv[:, 0] > 0.0) & (sv[:, -1] / sv[:, 0] > 1e-10)

    out = coefs.copy()
    if np.any(good):
        cand = np.linalg.solve(xb[good], yb[good][:, :, None])[:, :, 0]
        cand_resid = ys[good] - cand @ x.T
        cand_obj = _mean_check_loss(cand_resid, taus[good])
        keep = cand_obj <= obj[good] + 1e-10 * (1.0 + np.abs(obj[good]))
        idx = np.flatnonzero(good)[keep]
        out[idx] = cand[keep]

    # Degenerate bases: rebuild from the smallest residuals, adding rows
    # only while they extend the rank.
    for i in np.flatnonzero(~good):
        order = np.argsort(np.abs(resid[i]))
        rows: list[int] = []
        for j in order:
            trial = rows + [int(j)]
            if np.linalg.matrix_rank(x[trial]) == len(trial):
                rows = trial
            if len(rows) == q:
                break
        if len(rows) < q:
            continue
        cand = np.linalg.solve(x[rows], ys[i, rows])
        cand_obj = float(_mean_check_loss((ys[i] - x @ cand)[None, :], taus[i : i + 1])[0])
        if cand_obj <= obj[i] + 1e-10 * (1.0 + abs(obj[i])):
            out[i] = cand

    final_obj = _mean_check_loss(ys - out @ x.T, taus)
    return out, final_obj


def fit_qr_batch(
    ys: np.ndarray,
    x: np.ndarray,
    taus,
    tol: float = 1e-9,
    max_iter: int = 200,
) -> QrBatch:
    """Fit one design matrix against a batch of responses and quantiles.

    Parameters
    ----------
    ys : ndarray, shape (B, n)
        Response vectors, one per batch element.
    x : ndarray, shape (n, q)
        Shared design matrix, full column rank.
    taus : float or ndarray of shape (B,)
        Quantile level(s) per batch element.
    tol : float
        Duality-gap tolerance per observation.
    max_iter : int
        Interior point iteration cap.

    Raises
    ------
    RankDeficiencyError
        If the design is rank deficient.
    ConvergenceError
        If any batch element fails to converge; carries the best iterate.
    """
    x = np.asarray(x, dtype=float)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    _validate_design(x)
    b_size, n = ys.shape
    if x.shape[0] != n:
        raise ValueError("response length does not match design rows")
    taus = np.broadcast_to(np.asarray(taus, dtype=float), (b_size,)).copy()
    if np.any(taus <= 0.0) or np.any(taus >= 1.0):
        raise ValueError("every tau must lie strictly inside (0, 1)")
    if not np.all(np.isfinite(ys)):
        raise ValueError("response contains non-finite entries")

    q = x.shape[1]
    chunk = max(1, int(_CHUNK_ELEMENTS // max(n * q, 1)))
    coefs = np.empty((b_size, q))
    iters = np.empty(b_size, dtype=int)
    ok = np.empty(b_size, dtype=bool)
    for lo in range(0, b_size, chunk):
        hi = min(lo + chunk, b_size)
        coefs[lo:hi], iters[lo:hi], ok[lo:hi] = _interior_point(
            x, ys[lo:hi], taus[lo:hi], tol, max_iter
        )

    coefs, obj = _polish(x, ys, taus, coefs)
    batch = QrBatch(tau=taus, coefficients=coefs, objective=obj, iterations=iters, converged=ok)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise ConvergenceError(
            f"{int(np.sum(~ok))} of {b_size} quantile fits did not converge "
            f"within {max_iter} iterations (first failure at batch index {bad})",
            best=batch,
        )
    return batch


def fit_qr(
    y: np.ndarray,
    x: np.ndarray,
    tau: float,
    tol: float = 1e-9,
    max_iter: int = 200,
) -> QuantileFit:
    """Fit a single quantile regression of y on the columns of x.

    Returns a :class:`QuantileFit`; see :func:`fit_qr_batch` for the error
    contract.
    """
    try:
        batch = fit_qr_batch(np.asarray(y, dtype=float)[None, :], x, tau, tol, max_iter)
    except ConvergenceError as exc:
        raise ConvergenceError(str(exc), best=exc.best.fit(0)) from None
    return batch.fit(0)
