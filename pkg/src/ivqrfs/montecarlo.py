"""Synthetic location-scale experiments: size tables and power curves.

The data-generating process is a location-scale system with one
endogenous regressor:

    y = d + x + (1 + d) u
    d = c1 + a z1 + phi z2 + (1 + b z1) v

with x, z1, z2 independent Uniform(0,1) and (u, v) standard bivariate
normal with correlation rho.  The constant c1 keeps 1 + d positive so
the outcome equation is monotone in u.  The knob a moves the location
strength of z1, b moves its scale leverage, and phi switches the second
instrument on or off.

Experiments run three method arms per replication on the identical
dataset (common random numbers): the unweighted least-squares first
stage, the density-weighted first stage with the closed-form true
weights, and the same with weights estimated from the data.  Each arm
tests whether z1 enters the first stage, and rejection frequencies are
aggregated into plot-ready tables.  Replications are addressed by
counter-based random streams, so results are bit-identical for a fixed
master seed regardless of how the work is scheduled.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataset import ColumnNames, Dataset
from .first_stage import fit_first_stage, wald_test
from .ivqr import DEFAULT_GRID
from .stats_core import (
    EstimationError,
    RngStream,
    bivariate_normal_sample,
    norm_pdf,
    norm_quantile,
)
from .weights import WeightVector, sparsity_weights

__all__ = [
    "DgpConfig",
    "ReportRow",
    "SimulationReport",
    "METHOD_2SLS",
    "METHOD_TRUE_F",
    "METHOD_SPARSITY",
    "METHODS",
    "DEFAULT_NOMINALS",
    "simulate_dgp",
    "true_density_weights",
    "size_experiment",
    "power_experiment",
]

logger = logging.getLogger(__name__)

METHOD_2SLS = "FS-2SLS"
METHOD_TRUE_F = "FS-IVQR-true-f"
METHOD_SPARSITY = "FS-IVQR-sparsity"
METHODS = (METHOD_2SLS, METHOD_TRUE_F, METHOD_SPARSITY)

DEFAULT_NOMINALS = (0.10, 0.05, 0.01)


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the location-scale design and of the experiment."""

    n: int
    a: float
    b: float
    phi: float
    c1: float = 10.0
    rho: float = 0.5
    tau_list: tuple[float, ...] = (0.25, 0.50, 0.75)
    replications: int = 500
    master_seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 50:
            raise ValueError(f"n must be an integer >= 50, got {self.n}")
        object.__setattr__(self, "n", int(self.n))
        for name in ("a", "b", "phi", "c1", "rho"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not abs(self.rho) < 1.0:
            raise ValueError(f"|rho| < 1 required, got {self.rho}")
        taus = tuple(float(t) for t in self.tau_list)
        if not taus or any(not 0.0 < t < 1.0 for t in taus):
            raise ValueError("tau_list must hold levels strictly inside (0, 1)")
        object.__setattr__(self, "tau_list", taus)
        if int(self.replications) != self.replications or self.replications < 1:
            raise ValueError("replications must be a positive integer")
        object.__setattr__(self, "replications", int(self.replications))


@dataclass(frozen=True)
class ReportRow:
    """One rejection-rate cell of a size table or power curve."""

    tau: float
    nominal: float
    method: str
    rate: float
    reps: int
    n: int
    a: float
    b: float
    phi: float
    sweep_value: float | None = None


@dataclass(frozen=True)
class SimulationReport:
    """Aggregated rejection rates plus run bookkeeping.

    ``rows`` alone determine the serialized output; runtime is kept out
    of the files so repeated runs with one seed are byte-identical.
    ``error_counts`` tallies (tau, method) cells whose replication raised
    an estimation error; such cells shrink ``reps`` for the affected row
    instead of being dropped silently.
    """

    rows: tuple[ReportRow, ...]
    replications: int
    runtime_seconds: float
    error_counts: dict[str, int]
    boundary_hits: int

    def to_csv(self, path) -> None:
        """Write the rows as CSV with full-precision numeric fields."""
        has_sweep = any(r.sweep_value is not None for r in self.rows)
        header = ["tau", "nominal", "method", "rate", "reps", "n", "a", "b", "phi"]
        if has_sweep:
            header.append("sweep_value")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in self.rows:
                row = [
                    repr(float(r.tau)),
                    repr(float(r.nominal)),
                    r.method,
                    repr(float(r.rate)),
                    r.reps,
                    r.n,
                    repr(float(r.a)),
                    repr(float(r.b)),
                    repr(float(r.phi)),
                ]
                if has_sweep:
                    row.append("" if r.sweep_value is None else repr(float(r.sweep_value)))
                writer.writerow(row)


def simulate_dgp(config: DgpConfig, rep: int) -> Dataset:
    """Draw one replication of the location-scale design.

    Deterministic in ``(config.master_seed, rep)``: each replication owns
    a counter-based stream, so any worker can generate it independently.
    Both instruments are always drawn and returned; designs with
    ``phi = 0`` simply give z2 a zero coefficient in d.
    """
    gen = RngStream(config.master_seed, rep).generator()
    n = config.n
    x = gen.random(n)
    z1 = gen.random(n)
    z2 = gen.random(n)
    u, v = bivariate_normal_sample(gen, config.rho, n)
    d = config.c1 + config.a * z1 + config.phi * z2 + (1.0 + config.b * z1) * v
    y = d + x + (1.0 + d) * u
    return Dataset(
        y=y,
        d=d[:, None],
        x=np.column_stack([np.ones(n), x]),
        z=np.column_stack([z1, z2]),
        names=ColumnNames(
            outcome="y",
            endogenous=("d",),
            exogenous=("const", "x"),
            instruments=("z1", "z2"),
        ),
    )


def true_density_weights(
    data: Dataset, tau: float, rho: float, scale: float = 1.0
) -> WeightVector:
    """Closed-form density weights for the location-scale design.

    In the design the outcome error at quantile ``tau`` has conditional
    density f_i = phi(Phi^{-1}(tau)) / ((1 + scale * d_i) sqrt(1 - rho^2))
    at zero.  ``scale`` is the coefficient of d in the outcome spread;
    ``scale = 0`` is the pure location variant where the weights are the
    constant phi(Phi^{-1}(tau)) / sqrt(1 - rho^2).

    The returned vector is exact: no clipping, and ``bandwidth = 0.0``
    marks the absence of a finite-difference step.

    Raises
    ------
    ValueError
        If tau or rho is out of range, or any 1 + scale * d_i <= 0.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie strictly inside (0, 1), got {tau}")
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| < 1 required, got {rho}")
    if data.r != 1:
        raise ValueError("density weights are per-equation; pass r = 1 data")
    spread = 1.0 + scale * data.d[:, 0]
    if np.any(spread <= 0.0):
        raise ValueError(
            "1 + scale * d must be positive for every observation; "
            "the monotonicity of the outcome in its error fails otherwise"
        )
    values = norm_pdf(norm_quantile(tau)) / (spread * np.sqrt(1.0 - rho * rho))
    return WeightVector(tau=tau, bandwidth=0.0, values=values, clipped_count=0)


def _phi_zero_view(data: Dataset) -> Dataset:
    """Restrict the instrument block to z1 for the single-instrument arms."""
    return Dataset(
        y=data.y,
        d=data.d,
        x=data.x,
        z=data.z[:, :1],
        names=ColumnNames(
            outcome="y",
            endogenous=("d",),
            exogenous=("const", "x"),
            instruments=("z1",),
        ),
    )


def _replication_pvalues(config: DgpConfig, rep: int):
    """p-values keyed by (tau, method) for one replication.

    NaN marks a cell whose estimator raised; the caller counts those.
    Returns the boundary-warning count alongside.
    """
    data = simulate_dgp(config, rep)
    if config.phi == 0.0:
        data = _phi_zero_view(data)
    enforce = data.p > 1
    boundary = 0
    pvals: dict[tuple[float, str], float] = {}

    try:
        p_2sls = wald_test(
            fit_first_stage(data), [0], enforce_overidentification=enforce
        ).p_value
    except EstimationError:
        p_2sls = float("nan")

    for tau in config.tau_list:
        pvals[(tau, METHOD_2SLS)] = p_2sls
        try:
            wv = true_density_weights(data, tau, config.rho)
            pvals[(tau, METHOD_TRUE_F)] = wald_test(
                fit_first_stage(data, wv), [0], enforce_overidentification=enforce
            ).p_value
        except (EstimationError, ValueError):
            pvals[(tau, METHOD_TRUE_F)] = float("nan")
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                wv = sparsity_weights(data, tau, grid=DEFAULT_GRID)
            boundary += sum(
                "boundary" in str(w.message)
                for w in caught
                if issubclass(w.category, RuntimeWarning)
            )
            pvals[(tau, METHOD_SPARSITY)] = wald_test(
                fit_first_stage(data, wv), [0], enforce_overidentification=enforce
            ).p_value
        except EstimationError:
            pvals[(tau, METHOD_SPARSITY)] = float("nan")

    return pvals, boundary


def _worker(args):
    return _replication_pvalues(*args)


def _run_replications(config: DgpConfig, workers: int):
    reps = range(config.replications)
    if workers <= 1:
        return [_replication_pvalues(config, r) for r in reps]
    chunk = max(1, config.replications // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_worker, ((config, r) for r in reps), chunksize=chunk))


def _validate_nominals(nominal_levels) -> tuple[float, ...]:
    levels = tuple(float(v) for v in nominal_levels)
    if not levels:
        raise ValueError("need at least one nominal level")
    if any(not 0.0 < v <= 1.0 for v in levels):
        raise ValueError("nominal levels must lie in (0, 1]")
    # descending order mirrors the usual table layout
    return tuple(sorted(set(levels), reverse=True))


def _aggregate(
    config: DgpConfig,
    results,
    nominal_levels: tuple[float, ...],
    sweep_value: float | None,
):
    """Turn per-replication p-values into report rows and error counts."""
    rows = []
    error_counts = {m: 0 for m in METHODS}
    boundary = sum(b for _, b in results)
    for tau in config.tau_list:
        for method in METHODS:
            p = np.array([r[(tau, method)] for r, _ in results])
            bad = int(np.count_nonzero(np.isnan(p)))
            error_counts[method] += bad
            valid = p[~np.isnan(p)]
            for nominal in nominal_levels:
                rate = (
                    float(np.mean(valid < nominal)) if valid.size else float("nan")
                )
                rows.append(
                    ReportRow(
                        tau=tau,
                        nominal=nominal,
                        method=method,
                        rate=rate,
                        reps=int(valid.size),
                        n=config.n,
                        a=config.a,
                        b=config.b,
                        phi=config.phi,
                        sweep_value=sweep_value,
                    )
                )
    return rows, error_counts, boundary


def size_experiment(
    config: DgpConfig,
    nominal_levels=DEFAULT_NOMINALS,
    workers: int = 1,
) -> SimulationReport:
    """Rejection rates of the instrument-relevance test under the null.

    Requires ``a = b = 0`` so z1 truly drops out of the first stage.
    All three method arms run on the identical dataset per replication;
    with ``phi = 0`` the arms see z1 as the only instrument, so the
    estimated-weight step operates without identification, on purpose.
    """
    if config.a != 0.0 or config.b != 0.0:
        raise ValueError("size design requires a = 0 and b = 0")
    levels = _validate_nominals(nominal_levels)
    start = time.perf_counter()
    results = _run_replications(config, workers)
    rows, error_counts, boundary = _aggregate(config, results, levels, None)
    runtime = time.perf_counter() - start
    if boundary:
        logger.info("grid boundary hit in %d side fits", boundary)
    if any(error_counts.values()):
        logger.warning("replications with estimator errors: %s", error_counts)
    return SimulationReport(
        rows=tuple(rows),
        replications=config.replications,
        runtime_seconds=runtime,
        error_counts=error_counts,
        boundary_hits=boundary,
    )


def power_experiment(
    config: DgpConfig,
    sweep: str,
    grid,
    nominal_levels=(0.05,),
    workers: int = 1,
) -> SimulationReport:
    """Rejection-rate curves along an instrument-strength sweep.

    ``sweep`` picks the knob: "location" varies a (how far z1 shifts d),
    "scale" varies b (how much z1 spreads d).  Every grid point reuses
    the same master seed, so curves share their random numbers and
    monotonicity is not blurred by independent noise.  The grid point
    with the knob at zero reproduces the size experiment exactly.
    """
    if sweep not in ("location", "scale"):
        raise ValueError(f'sweep must be "location" or "scale", got {sweep!r}')
    values = tuple(float(v) for v in np.asarray(grid, dtype=float).ravel())
    if not values:
        raise ValueError("sweep grid is empty")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError("sweep grid must lie within [0, 1]")
    levels = _validate_nominals(nominal_levels)
    start = time.perf_counter()
    rows: list[ReportRow] = []
    error_counts = {m: 0 for m in METHODS}
    boundary = 0
    for value in values:
        point = (
            replace(config, a=value)
            if sweep == "location"
            else replace(config, b=value)
        )
        results = _run_replications(point, workers)
        point_rows, point_errors, point_boundary = _aggregate(
            point, results, levels, value
        )
        rows.extend(point_rows)
        for m in METHODS:
            error_counts[m] += point_errors[m]
        boundary += point_boundary
    runtime = time.perf_counter() - start
    if boundary:
        logger.info("grid boundary hit in %d side fits", boundary)
    if any(error_counts.values()):
        logger.warning("replications with estimator errors: %s", error_counts)
    return SimulationReport(
        rows=tuple(rows),
        replications=config.replications,
        runtime_seconds=runtime,
        error_counts=error_counts,
        boundary_hits=boundary,
    )
