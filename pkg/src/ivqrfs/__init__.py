"""Quantile first-stage estimation and instrument relevance testing.

The pieces compose in estimation order: load or simulate a
:class:`Dataset`, estimate the structural quantile coefficient with
:func:`fit_ivqr`, turn the fitted residual spread into density weights
with :func:`sparsity_weights`, project the endogenous variable with
:func:`fit_first_stage`, and test instrument relevance with
:func:`wald_test`.  ``simulate``/``power`` wrap that loop into rejection
rate tables, and the ``ivqrfs`` console script exposes all of it.
"""

from .dataset import (
    ColumnNames,
    DataError,
    Dataset,
    FetchError,
    card_mapping_path,
    fetch_card_archive,
    load_csv,
    parse_mapping,
    prepare_card_csv,
)
from .first_stage import (
    FirstStageResult,
    JacobianReport,
    WaldTest,
    fit_first_stage,
    jacobian_diagnostics,
    sandwich_cov,
    wald_test,
)
from .ivqr import DEFAULT_GRID, AlphaGrid, IvqrFit, fit_ivqr, weighting_matrix
from .montecarlo import (
    DgpConfig,
    ReportRow,
    SimulationReport,
    power_experiment,
    simulate_dgp,
    size_experiment,
    true_density_weights,
)
from .report import objective_curve_figure, power_curve_figure
from .stats_core import EstimationError, RankDeficiencyError, RngStream
from .weights import WeightVector, hall_sheather_bandwidth, sparsity_weights

__version__ = "0.1.0"

__all__ = [
    "AlphaGrid",
    "ColumnNames",
    "DEFAULT_GRID",
    "DataError",
    "Dataset",
    "DgpConfig",
    "EstimationError",
    "FetchError",
    "FirstStageResult",
    "IvqrFit",
    "JacobianReport",
    "RankDeficiencyError",
    "ReportRow",
    "RngStream",
    "SimulationReport",
    "WaldTest",
    "WeightVector",
    "card_mapping_path",
    "fetch_card_archive",
    "fit_first_stage",
    "fit_ivqr",
    "hall_sheather_bandwidth",
    "jacobian_diagnostics",
    "load_csv",
    "objective_curve_figure",
    "parse_mapping",
    "power_curve_figure",
    "power_experiment",
    "prepare_card_csv",
    "sandwich_cov",
    "simulate_dgp",
    "size_experiment",
    "sparsity_weights",
    "true_density_weights",
    "wald_test",
    "weighting_matrix",
    "__version__",
]
