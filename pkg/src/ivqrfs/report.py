"""Figure rendering for fit and simulation reports.

Each function takes an already-computed result object and a target path,
draws on an Agg canvas directly (no pyplot, no global backend state), and
writes the file.  Callers that also produce delimited output should treat a
figure failure as cosmetic: trap it, log it, and keep the data files.
"""

from __future__ import annotations

from collections.abc import Iterable
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .ivqr import IvqrFit
from .montecarlo import SimulationReport

__all__ = ["objective_curve_figure", "power_curve_figure"]

# One fixed look per standard method so curves are comparable across figures;
# unknown method labels fall back to the default color cycle.
_METHOD_STYLE = {
    "FS-2SLS": {"color": "0.45", "linestyle": "--", "marker": "s"},
    "FS-IVQR-true-f": {"color": "tab:blue", "linestyle": "-", "marker": "o"},
    "FS-IVQR-sparsity": {"color": "tab:red", "linestyle": "-", "marker": "^"},
}


def _style(method: str, index: int) -> dict:
    style = _METHOD_STYLE.get(method)
    if style is None:
        style = {"color": f"C{index % 10}", "linestyle": "-", "marker": "x"}
    return dict(style)


def objective_curve_figure(fits: IvqrFit | Iterable[IvqrFit], path, dpi: int = 150) -> Path:
    """Plot the grid-search objective with the minimizer marked, one line per tau.

    Parameters
    ----------
    fits : IvqrFit or iterable of IvqrFit
        Fits to overlay; they may use different grids.
    path : str or Path
        Output file; the extension picks the format (.png, .pdf, ...).

    Returns
    -------
    Path
        The path written.
    """
    if isinstance(fits, IvqrFit):
        fits = [fits]
    fits = list(fits)
    if not fits:
        raise ValueError("no fits to draw")

    fig = Figure(figsize=(6.4, 4.2))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot()
    for fit in fits:
        (line,) = ax.plot(fit.grid, fit.objective_curve, linewidth=1.4,
                          label=f"tau = {fit.tau:g}")
        ax.axvline(fit.alpha_hat, color=line.get_color(), linestyle=":",
                   linewidth=1.0)
    ax.set_xlabel("candidate endogenous coefficient")
    ax.set_ylabel("instrument-coefficient norm")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=dpi)
    return path


def power_curve_figure(report: SimulationReport, path, nominal: float | None = None,
                       dpi: int = 150) -> Path:
    """Plot rejection rate against the sweep value, one panel per quantile.

    Parameters
    ----------
    report : SimulationReport
        Output of a sweep run; rows must carry ``sweep_value``.
    path : str or Path
        Output file; the extension picks the format.
    nominal : float, optional
        Which nominal level to draw when the report holds several.  May be
        omitted when the report has exactly one.

    Returns
    -------
    Path
        The path written.
    """
    rows = [r for r in report.rows if r.sweep_value is not None]
    if not rows:
        raise ValueError("report has no sweep values; power curves need a sweep run")

    nominals = sorted({r.nominal for r in rows})
    if nominal is None:
        if len(nominals) > 1:
            raise ValueError(
                f"report holds several nominal levels {nominals}; pass nominal="
            )
        nominal = nominals[0]
    elif not any(np.isclose(nominal, lv) for lv in nominals):
        raise ValueError(f"no rows at nominal level {nominal}; report has {nominals}")
    rows = [r for r in rows if np.isclose(r.nominal, nominal)]

    taus = sorted({r.tau for r in rows})
    methods = []
    for r in rows:
        if r.method not in methods:
            methods.append(r.method)

    fig = Figure(figsize=(4.0 * len(taus), 3.6))
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, len(taus), sharey=True, squeeze=False)[0]
    for ax, tau in zip(axes, taus):
        for i, method in enumerate(methods):
            pts = sorted(
                (r.sweep_value, r.rate)
                for r in rows
                if r.tau == tau and r.method == method
            )
            if not pts:
                continue
            xs = np.array([p[0] for p in pts])
            ys = np.array([p[1] for p in pts])
            ax.plot(xs, ys, linewidth=1.3, markersize=4, label=method,
                    **_style(method, i))
        ax.axhline(nominal, color="0.6", linestyle=":", linewidth=0.9)
        ax.set_xlabel(_sweep_label(rows))
        ax.set_title(f"tau = {tau:g}", fontsize=10)
        ax.set_ylim(-0.02, 1.02)
    axes[0].set_ylabel("rejection rate")
    axes[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=dpi)
    return path


def _sweep_label(rows) -> str:
    """Name the swept design knob by whichever coefficient actually varies."""
    if len({r.a for r in rows}) > 1:
        return "location shift a"
    if len({r.b for r in rows}) > 1:
        return "scale shift b"
    return "sweep value"
