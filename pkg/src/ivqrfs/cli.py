"""Command-line front end.

Subcommands
-----------
fit             grid-search estimate on a CSV dataset, per quantile
first-stage     weighted first-stage table with relevance tests
simulate        rejection rates under the null design
power           rejection-rate sweep over a location or scale shift
replicate-card  fetch the schooling dataset and rebuild its tables

Reports go to ``--out`` in CSV or JSON at full float precision, or to
stdout when ``--out`` is omitted.  When a report lands in a file, figures
are rendered next to it with the same stem; a figure failure never costs
the data file.  Exit codes: 0 success, 1 estimation failure, 2 usage
error, 3 I/O or download failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import (
    CARD_ARCHIVE_URL,
    Dataset,
    FetchError,
    card_mapping_path,
    default_cache_dir,
    fetch_card_archive,
    load_csv,
    parse_mapping,
    prepare_card_csv,
)
from .first_stage import FirstStageResult, fit_first_stage, wald_test
from .ivqr import DEFAULT_GRID, AlphaGrid, fit_ivqr
from .montecarlo import DEFAULT_NOMINALS, DgpConfig, power_experiment, size_experiment
from .report import objective_curve_figure, power_curve_figure
from .stats_core import EstimationError, chisq_sf
from .weights import sparsity_weights

log = logging.getLogger(__name__)

DEFAULT_TAUS = (0.25, 0.50, 0.75)
# Replication defaults: unit-interval grid at the published resolution and
# the data-driven norm weighting.
CARD_GRID = AlphaGrid(0.0, 1.0, 0.004)
STAR_LEGEND = "*** p<0.01, ** p<0.05, * p<0.1"

_A_MODES = {"identity": "identity", "invcov": "inverse_gamma_cov"}


def significance_stars(p_value: float) -> str:
    """Conventional significance marks: *** p<0.01, ** p<0.05, * p<0.1."""
    if not np.isfinite(p_value):
        return ""
    if p_value < 0.01:
        return "***"
    if p_value < 0.05:
        return "**"
    if p_value < 0.1:
        return "*"
    return ""


# --- argument parsing ---------------------------------------------------------


def _tau_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"tau list {text!r} is not numeric")
    if not values:
        raise argparse.ArgumentTypeError("tau list is empty")
    for v in values:
        if not 0.0 < v < 1.0:
            raise argparse.ArgumentTypeError(f"tau must lie in (0, 1), got {v}")
    return values


def _float_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated float list")
    if not values:
        raise argparse.ArgumentTypeError("float list is empty")
    return values


def _grid_spec(text: str) -> AlphaGrid:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"grid must be lo:step:hi, got {text!r}")
    try:
        lo, step, hi = (float(p) for p in parts)
        return AlphaGrid(lo=lo, hi=hi, step=step)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: {exc}")


def _name_list(text: str) -> tuple[str, ...]:
    names = tuple(p.strip() for p in text.split(",") if p.strip())
    if not names:
        raise argparse.ArgumentTypeError("--test needs at least one instrument name")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivqrfs",
        description="Instrumental-variables quantile regression: first-stage "
        "representation, relevance tests, and simulation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add_output(p):
        p.add_argument("--out", type=Path, default=None,
                       help="report file; figures land next to it (stdout when omitted)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")

    def add_data(p):
        p.add_argument("--data", type=Path, required=True, help="CSV dataset")
        p.add_argument("--map", type=Path, required=True,
                       help="role-mapping file (outcome/endogenous/exogenous/instruments)")

    def add_tau(p):
        p.add_argument("--tau", type=_tau_list, default=DEFAULT_TAUS,
                       help="comma-separated quantiles in (0,1)")

    def add_grid(p, default):
        p.add_argument("--grid", type=_grid_spec, default=default,
                       help="search grid lo:step:hi for the endogenous coefficient")

    def add_a(p, default):
        p.add_argument("--A", choices=sorted(_A_MODES), default=default,
                       help="norm weighting for the grid objective")

    fit = sub.add_parser("fit", help="grid-search estimate per quantile")
    add_data(fit)
    add_tau(fit)
    add_grid(fit, DEFAULT_GRID)
    add_a(fit, "identity")
    add_output(fit)
    fit.set_defaults(func=cmd_fit)

    fs = sub.add_parser("first-stage", help="weighted first-stage table with relevance tests")
    add_data(fs)
    add_tau(fs)
    add_grid(fs, DEFAULT_GRID)
    add_a(fs, "identity")
    fs.add_argument("--test", type=_name_list, default=None,
                    help="instrument names for a joint relevance test "
                    "(default: each instrument tested alone)")
    add_output(fs)
    fs.set_defaults(func=cmd_first_stage)

    sim = sub.add_parser("simulate", help="null rejection rates on the synthetic design")
    sim.add_argument("--n", type=int, default=500)
    sim.add_argument("--a", type=float, default=0.0)
    sim.add_argument("--b", type=float, default=0.0)
    sim.add_argument("--phi", type=float, default=1.0)
    add_tau(sim)
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--nominal", type=_float_list, default=DEFAULT_NOMINALS,
                     help="comma-separated nominal levels")
    sim.add_argument("--workers", type=int, default=1)
    add_output(sim)
    sim.set_defaults(func=cmd_simulate)

    pw = sub.add_parser("power", help="rejection-rate sweep over a design shift")
    pw.add_argument("--n", type=int, default=1000)
    pw.add_argument("--phi", type=float, default=1.0)
    pw.add_argument("--sweep", choices=("location", "scale"), required=True)
    pw.add_argument("--sweep-grid", type=_float_list,
                    default=(0.0, 0.25, 0.5, 0.75, 1.0),
                    help="comma-separated shift values in [0, 1]")
    add_tau(pw)
    pw.add_argument("--reps", type=int, default=300)
    pw.add_argument("--seed", type=int, default=0)
    pw.add_argument("--nominal", type=_float_list, default=(0.05,))
    pw.add_argument("--workers", type=int, default=1)
    add_output(pw)
    pw.set_defaults(func=cmd_power)

    card = sub.add_parser("replicate-card", help="fetch the schooling data and rebuild its tables")
    add_tau(card)
    add_grid(card, CARD_GRID)
    add_a(card, "invcov")
    card.add_argument("--map", type=Path, default=None,
                      help="override the shipped role mapping")
    card.add_argument("--test", type=_name_list, default=None)
    card.add_argument("--url", default=CARD_ARCHIVE_URL)
    card.add_argument("--cache-dir", type=Path, default=None,
                      help="archive cache (default: IVQR_CACHE_DIR or ~/.cache/ivqrfs)")
    add_output(card)
    card.set_defaults(func=cmd_replicate_card)

    return parser


# --- output plumbing ----------------------------------------------------------


def _cell(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(stream, header, rows) -> None:
    writer = csv.writer(stream)
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])


def _deliver(args, payload, header, rows, human=(), figures=(), csv_file_writer=None) -> int:
    """Route one report to --out or stdout; render figures next to files.

    ``figures`` holds (path, render) pairs; a rendering failure is logged
    and swallowed so the delimited output always survives.
    ``csv_file_writer`` overrides the generic CSV writer for file targets
    whose byte layout is owned by the result object itself.
    """
    if args.out is None:
        if args.format == "json":
            print(json.dumps(payload, indent=2))
        else:
            _write_csv(sys.stdout, header, rows)
        return 0

    out = Path(args.out)
    if args.format == "json":
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    elif csv_file_writer is not None:
        csv_file_writer(out)
    else:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            _write_csv(fh, header, rows)
    for line in human:
        print(line)
    print(f"wrote {out}")
    for fig_path, render in figures:
        try:
            render(fig_path)
        except Exception as exc:  # cosmetic output only
            log.warning("figure rendering failed (%s); data files are intact", exc)
        else:
            print(f"wrote {fig_path}")
    return 0


def _load_dataset(args) -> Dataset:
    mapping = parse_mapping(args.map)
    return load_csv(args.data, mapping)


# --- fit ------------------------------------------------------------------------


def _fit_payload(fit, names) -> dict:
    grid = {"lo": float(fit.grid[0]), "hi": float(fit.grid[-1]),
            "step": float(fit.grid[1] - fit.grid[0])}
    return {
        "tau": float(fit.tau),
        "alpha_hat": float(fit.alpha_hat),
        "endogenous": names.endogenous[0],
        "beta_hat": {nm: float(v) for nm, v in zip(names.exogenous, fit.beta_hat)},
        "gamma_hat": {nm: float(v) for nm, v in zip(names.instruments, fit.gamma_hat)},
        "objective_min": float(fit.objective_curve.min()),
        "at_boundary": bool(fit.at_boundary),
        "flat_curve": bool(fit.flat_curve),
        "grid": grid,
        "alpha_grid": np.asarray(fit.grid, dtype=float).tolist(),
        "objective_curve": np.asarray(fit.objective_curve, dtype=float).tolist(),
    }


def cmd_fit(args) -> int:
    data = _load_dataset(args)
    grid = args.grid
    fits = [fit_ivqr(data, tau, grid, _A_MODES[args.A]) for tau in args.tau]
    names = data.names

    header = ["tau", "role", "term", "estimate"]
    rows, human = [], []
    for fit in fits:
        rows.append([fit.tau, "endogenous", names.endogenous[0], fit.alpha_hat])
        for nm, v in zip(names.exogenous, fit.beta_hat):
            rows.append([fit.tau, "exogenous", nm, v])
        for nm, v in zip(names.instruments, fit.gamma_hat):
            rows.append([fit.tau, "instrument", nm, v])
        note = " (boundary)" if fit.at_boundary else ""
        human.append(f"tau {fit.tau:g}: {names.endogenous[0]} = {fit.alpha_hat:.6g}{note}")
    payload = {"command": "fit", "n": int(data.n), "fits": [_fit_payload(f, names) for f in fits]}

    figures = []
    if args.out is not None:
        figures.append((Path(args.out).with_suffix(".png"),
                        lambda p: objective_curve_figure(fits, p)))
        if args.format == "csv":
            curve_path = Path(args.out).with_name(Path(args.out).stem + "_curve.csv")
            with open(curve_path, "w", newline="", encoding="utf-8") as fh:
                _write_csv(fh, ["tau", "alpha", "objective"],
                           [[f.tau, a, v] for f in fits
                            for a, v in zip(f.grid, f.objective_curve)])
            human.append(f"wrote {curve_path}")
    return _deliver(args, payload, header, rows, human, figures)


# --- first stage ------------------------------------------------------------------


def _test_indices(names, data: Dataset):
    if names is None:
        return None
    instruments = data.names.instruments
    indices = []
    for nm in names:
        if nm not in instruments:
            raise ValueError(
                f"--test names unknown instrument {nm!r}; "
                f"instruments are {', '.join(instruments)}"
            )
        indices.append(instruments.index(nm))
    return indices


def _first_stage_rows(method, tau, result: FirstStageResult, tested, data: Dataset):
    """Coefficient rows plus Wald rows for one fitted projection."""
    se = np.sqrt(np.diag(result.cov))
    rows, coef_payload, wald_payload = [], [], []
    for nm, est, s in zip(result.names, result.mu_hat, se):
        z = est / s if s > 0 else float("nan")
        p = chisq_sf(z * z, 1) if np.isfinite(z) else float("nan")
        stars = significance_stars(p)
        rows.append([method, tau, nm, est, s, z, "", p, stars])
        coef_payload.append({"term": nm, "estimate": float(est), "std_error": float(s),
                             "z": float(z), "p_value": float(p), "stars": stars})

    instruments = data.names.instruments
    if tested is not None:
        groups = [tuple(tested)]
    elif data.p >= 2:
        groups = [(j,) for j in range(data.p)]
    else:
        groups = []
        log.info("joint relevance test skipped: testing the only instrument "
                 "would leave the model unidentified")
    for group in groups:
        wt = wald_test(result, list(group))
        label = "wald:" + "+".join(instruments[j] for j in group)
        stars = significance_stars(wt.p_value)
        rows.append([method, tau, label, "", "", wt.statistic, wt.dof, wt.p_value, stars])
        wald_payload.append({"tested": [instruments[j] for j in group],
                             "statistic": float(wt.statistic), "dof": int(wt.dof),
                             "p_value": float(wt.p_value), "stars": stars})
    return rows, coef_payload, wald_payload


def _instrument_summary(method, tau, result: FirstStageResult, data: Dataset) -> str:
    se = np.sqrt(np.diag(result.cov))
    parts = []
    for j, nm in enumerate(data.names.instruments):
        est = result.delta_hat[j]
        s = se[data.k + j]
        z = est / s if s > 0 else float("nan")
        p = chisq_sf(z * z, 1) if np.isfinite(z) else float("nan")
        parts.append(f"{nm} = {est:.4g} ({s:.4g}){significance_stars(p)}")
    tag = method if tau is None else f"{method} tau {tau:g}"
    return f"{tag}: " + ", ".join(parts)


def cmd_first_stage(args) -> int:
    data = _load_dataset(args)
    tested = _test_indices(args.test, data)
    results = [("FS-2SLS", None, fit_first_stage(data), None)]
    for tau in args.tau:
        w = sparsity_weights(data, tau, args.grid, _A_MODES[args.A])
        results.append(("FS-IVQR", tau, fit_first_stage(data, w), w))

    header = ["method", "tau", "term", "estimate", "std_error",
              "statistic", "dof", "p_value", "stars"]
    rows, human, payload_fits = [], [], []
    for method, tau, result, w in results:
        fit_rows, coefs, walds = _first_stage_rows(method, tau, result, tested, data)
        rows.extend(fit_rows)
        human.append(_instrument_summary(method, tau, result, data))
        entry = {"method": method, "tau": None if tau is None else float(tau),
                 "coefficients": coefs, "wald": walds}
        if w is not None:
            entry["weights"] = {"bandwidth": float(w.bandwidth),
                                "clipped_count": int(w.clipped_count)}
        payload_fits.append(entry)
    human.append(f"significance: {STAR_LEGEND}")
    payload = {"command": "first-stage", "n": int(data.n),
               "stars": STAR_LEGEND, "fits": payload_fits}
    return _deliver(args, payload, header, rows, human)


# --- simulation -------------------------------------------------------------------


def _sim_rows(report):
    has_sweep = any(r.sweep_value is not None for r in report.rows)
    header = ["tau", "nominal", "method", "rate", "reps", "n", "a", "b", "phi"]
    if has_sweep:
        header.append("sweep_value")
    rows = []
    for r in report.rows:
        row = [r.tau, r.nominal, r.method, r.rate, r.reps, r.n, r.a, r.b, r.phi]
        if has_sweep:
            row.append(r.sweep_value)
        rows.append(row)
    return header, rows


def _sim_payload(command, report) -> dict:
    # runtime stays out of the payload so equal seeds give equal bytes
    rows = []
    for r in report.rows:
        entry = {"tau": float(r.tau), "nominal": float(r.nominal), "method": r.method,
                 "rate": float(r.rate), "reps": int(r.reps), "n": int(r.n),
                 "a": float(r.a), "b": float(r.b), "phi": float(r.phi)}
        if r.sweep_value is not None:
            entry["sweep_value"] = float(r.sweep_value)
        rows.append(entry)
    return {"command": command, "replications": int(report.replications),
            "rows": rows, "error_counts": dict(report.error_counts),
            "boundary_hits": int(report.boundary_hits)}


def _sim_human(report) -> list[str]:
    lines = []
    for r in report.rows:
        sweep = "" if r.sweep_value is None else f" sweep {r.sweep_value:g}"
        lines.append(f"tau {r.tau:g}{sweep} {r.method}: "
                     f"rate {r.rate:.4g} at nominal {r.nominal:g} ({r.reps} reps)")
    if report.boundary_hits:
        lines.append(f"boundary hits: {report.boundary_hits}")
    errs = {k: v for k, v in report.error_counts.items() if v}
    if errs:
        lines.append(f"errored replications: {errs}")
    return lines


def cmd_simulate(args) -> int:
    config = DgpConfig(n=args.n, a=args.a, b=args.b, phi=args.phi,
                       tau_list=args.tau, replications=args.reps,
                       master_seed=args.seed)
    report = size_experiment(config, nominal_levels=args.nominal, workers=args.workers)
    header, rows = _sim_rows(report)
    return _deliver(args, _sim_payload("simulate", report), header, rows,
                    _sim_human(report), csv_file_writer=report.to_csv)


def cmd_power(args) -> int:
    config = DgpConfig(n=args.n, a=0.0, b=0.0, phi=args.phi,
                       tau_list=args.tau, replications=args.reps,
                       master_seed=args.seed)
    report = power_experiment(config, args.sweep, args.sweep_grid,
                              nominal_levels=args.nominal, workers=args.workers)
    header, rows = _sim_rows(report)
    figures = []
    if args.out is not None and len(args.nominal) == 1:
        figures.append((Path(args.out).with_suffix(".png"),
                        lambda p: power_curve_figure(report, p, nominal=args.nominal[0])))
    return _deliver(args, _sim_payload("power", report), header, rows,
                    _sim_human(report), figures, csv_file_writer=report.to_csv)


# --- replication --------------------------------------------------------------------


def cmd_replicate_card(args) -> int:
    cache = args.cache_dir if args.cache_dir is not None else default_cache_dir()
    archive = fetch_card_archive(args.url, cache)
    csv_path = Path(cache) / "card.csv"
    prepare_card_csv(archive, csv_path)
    mapping = parse_mapping(args.map if args.map is not None else card_mapping_path())
    data = load_csv(csv_path, mapping)
    log.info("sample: n = %d after dropping %d incomplete rows", data.n, data.dropped_rows)

    tested = _test_indices(args.test, data)
    header = ["method", "tau", "term", "estimate", "std_error",
              "statistic", "dof", "p_value", "stars"]
    rows, human, payload_fits = [], [], []

    two_sls = fit_first_stage(data)
    fit_rows, coefs, walds = _first_stage_rows("FS-2SLS", None, two_sls, tested, data)
    rows.extend(fit_rows)
    human.append(_instrument_summary("FS-2SLS", None, two_sls, data))
    payload_fits.append({"method": "FS-2SLS", "tau": None,
                         "coefficients": coefs, "wald": walds})

    names = data.names
    second_stage, central_fits = [], []
    for tau in args.tau:
        central = fit_ivqr(data, tau, args.grid, _A_MODES[args.A])
        central_fits.append(central)
        w = sparsity_weights(data, tau, args.grid, a_mode=central.A)
        fs = fit_first_stage(data, w)
        fit_rows, coefs, walds = _first_stage_rows("FS-IVQR", tau, fs, tested, data)
        rows.extend(fit_rows)
        human.append(_instrument_summary("FS-IVQR", tau, fs, data))

        rows.append(["IVQR", tau, names.endogenous[0], central.alpha_hat,
                     "", "", "", "", ""])
        for nm, v in zip(names.exogenous, central.beta_hat):
            rows.append(["IVQR", tau, nm, v, "", "", "", "", ""])
        human.append(f"IVQR tau {tau:g}: {names.endogenous[0]} = {central.alpha_hat:.4g}")
        payload_fits.append({
            "method": "FS-IVQR", "tau": float(tau),
            "coefficients": coefs, "wald": walds,
            "weights": {"bandwidth": float(w.bandwidth),
                        "clipped_count": int(w.clipped_count)},
        })
        second_stage.append(_fit_payload(central, names))

    human.append(f"significance: {STAR_LEGEND}")
    payload = {"command": "replicate-card", "n": int(data.n),
               "dropped_rows": int(data.dropped_rows), "stars": STAR_LEGEND,
               "fits": payload_fits, "second_stage": second_stage}

    figures = []
    if args.out is not None and central_fits:
        figures.append((Path(args.out).with_suffix(".png"),
                        lambda p: objective_curve_figure(central_fits, p)))
    return _deliver(args, payload, header, rows, human, figures)


# --- entry point --------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FetchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
