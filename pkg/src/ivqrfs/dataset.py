"""Data model and ingestion for instrumental-variables quantile regression.

A :class:`Dataset` carries the outcome ``y``, the endogenous block ``d``, the
exogenous regressors ``x`` (including the intercept), and the instruments
``z``, together with per-column labels.  Downstream code works with the
stacked designs ``w = [x, z]`` (first-stage regressors) and
``s = [d, x, z]`` (the full regressor set whose coefficient vector the
density weights are built around).

CSV ingestion maps header names onto the four roles, drops rows with missing
values in any mapped column (listwise deletion, counted and logged), and can
prepend a synthetic intercept.  A small fetch-and-prepare pipeline for the
Card (1995) college-proximity extract lives here as well; it caches the
downloaded archive under a user-controllable directory so repeat runs are
offline.
"""

from __future__ import annotations

import csv
import importlib.resources
import logging
import os
import re
import shutil
import urllib.error
import urllib.parse
import urllib.request
import warnings
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised when input data violate the model contract."""


class FetchError(RuntimeError):
    """Raised when a remote archive cannot be obtained and no cache exists."""


@dataclass(frozen=True)
class ColumnNames:
    """Labels for every matrix column, in storage order."""

    outcome: str
    endogenous: tuple[str, ...]
    exogenous: tuple[str, ...]
    instruments: tuple[str, ...]


def _as_matrix(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise DataError(f"{name} must be 1- or 2-dimensional, got ndim={out.ndim}")
    return out


@dataclass(frozen=True)
class Dataset:
    """Outcome, endogenous regressors, exogenous regressors, instruments.

    ``x`` may be empty (zero columns) for diagnostic runs without exogenous
    controls; when nonempty it must contain the intercept exactly once.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    z: np.ndarray
    names: ColumnNames | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        d = _as_matrix(self.d, "d")
        x = _as_matrix(self.x, "x") if np.size(self.x) else np.empty((y.shape[0], 0))
        z = _as_matrix(self.z, "z")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        n = y.shape[0]
        for label, mat in (("d", d), ("x", x), ("z", z)):
            if mat.shape[0] != n:
                raise DataError(
                    f"{label} has {mat.shape[0]} rows but y has {n}"
                )
        if n == 0:
            raise DataError("dataset has zero rows")
        if d.shape[1] < 1:
            raise DataError("at least one endogenous column is required")
        if z.shape[1] < 1:
            raise DataError("at least one instrument is required")
        for label, arr in (("y", y), ("d", d), ("x", x), ("z", z)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise DataError(f"{label} contains missing or non-finite entries")
        if x.shape[1]:
            spans = np.ptp(x, axis=0)
            const = np.flatnonzero(spans == 0.0)
            if const.size != 1 or x[0, const[0]] == 0.0:
                raise DataError(
                    "x must contain exactly one nonzero constant (intercept) column"
                )
        if self.names is None:
            object.__setattr__(self, "names", self._default_names())
        nm = self.names
        if (
            len(nm.endogenous) != d.shape[1]
            or len(nm.exogenous) != x.shape[1]
            or len(nm.instruments) != z.shape[1]
        ):
            raise DataError("column labels do not match matrix shapes")

    def _default_names(self) -> ColumnNames:
        return ColumnNames(
            outcome="y",
            endogenous=tuple(f"d{j + 1}" for j in range(self.d.shape[1])),
            exogenous=tuple(f"x{j + 1}" for j in range(self.x.shape[1])),
            instruments=tuple(f"z{j + 1}" for j in range(self.z.shape[1])),
        )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def r(self) -> int:
        return self.d.shape[1]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    def w(self) -> np.ndarray:
        """First-stage regressor matrix [x, z], shape (n, k + p)."""
        return np.hstack([self.x, self.z])

    def s(self) -> np.ndarray:
        """Full regressor matrix [d, x, z], shape (n, r + k + p)."""
        return np.hstack([self.d, self.x, self.z])


# ---------------------------------------------------------------------------
# CSV ingestion

# cell values treated as missing (case-insensitive); "." is the NLS
# convention used by the proximity extract
MISSING_TOKENS = frozenset({"", ".", "na", "nan", "n/a"})

_MAPPING_ROLES = ("outcome", "endogenous", "exogenous", "instruments")


def parse_mapping(path) -> ColumnNames:
    """Read a column-role mapping from a small key = value text file.

    Recognized keys: ``outcome`` (one name), ``endogenous``,
    ``exogenous``, ``instruments`` (whitespace- or comma-separated name
    lists).  An indented line continues the previous key's list.
    ``exogenous`` may be omitted or empty; the other roles are required.
    ``#`` starts a comment.
    """
    values: dict[str, tuple[str, ...]] = {}
    last_key: str | None = None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        key, sep, rest = line.strip().partition("=")
        if not sep:
            key, sep, rest = line.strip().partition(":")
        if sep:
            key = key.strip().lower()
            if key not in _MAPPING_ROLES:
                raise DataError(f"unknown mapping key {key!r} on line {lineno}")
            if key in values:
                raise DataError(f"mapping key {key!r} given twice (line {lineno})")
            values[key] = tuple(t for t in re.split(r"[,\s]+", rest.strip()) if t)
            last_key = key
        elif line[0].isspace() and last_key is not None:
            # indented bare names continue the previous role's list
            extra = tuple(t for t in re.split(r"[,\s]+", line.strip()) if t)
            values[last_key] = values[last_key] + extra
        else:
            raise DataError(f"mapping line {lineno} is not 'role = names': {raw!r}")
    for role in ("outcome", "endogenous", "instruments"):
        if not values.get(role):
            raise DataError(f"mapping must assign at least one column to {role!r}")
    if len(values["outcome"]) != 1:
        raise DataError("mapping must assign exactly one outcome column")
    return ColumnNames(
        outcome=values["outcome"][0],
        endogenous=values["endogenous"],
        exogenous=values.get("exogenous", ()),
        instruments=values["instruments"],
    )


def card_mapping_path() -> Path:
    """Path of the shipped column-role mapping for the Card extract."""
    return Path(
        importlib.resources.files("ivqrfs").joinpath("data/card_mapping.txt")
    )


def load_csv(path, mapping: ColumnNames, add_intercept: bool = True) -> Dataset:
    """Build a Dataset from a headed CSV file and a column-role mapping.

    Rows with a missing value in any mapped column are dropped (listwise
    deletion); the count lands in ``Dataset.dropped_rows`` and the log.
    ``add_intercept`` prepends a constant exogenous column named
    ``const``.

    Raises
    ------
    DataError
        On a missing or duplicated mapped column, a non-numeric cell, or
        when no rows survive deletion.
    """
    wanted = [
        mapping.outcome,
        *mapping.endogenous,
        *mapping.exogenous,
        *mapping.instruments,
    ]
    if len(set(wanted)) != len(wanted):
        raise DataError("mapping assigns some column to more than one role")
    if add_intercept and "const" in mapping.exogenous:
        raise DataError(
            "mapping already contains 'const'; pass add_intercept=False"
        )
    with open(path, newline="", encoding="utf-8") as fh:
        records = list(csv.reader(fh))
    records = [row for row in records if any(cell.strip() for cell in row)]
    if not records:
        raise DataError(f"{path} is empty")
    header = [cell.strip() for cell in records[0]]
    index: dict[str, int] = {}
    for name in wanted:
        hits = [j for j, h in enumerate(header) if h == name]
        if not hits:
            raise DataError(f"CSV has no column named {name!r}")
        if len(hits) > 1:
            raise DataError(f"CSV column {name!r} appears more than once")
        index[name] = hits[0]

    kept: list[list[float]] = []
    dropped = 0
    for lineno, row in enumerate(records[1:], start=2):
        parsed: list[float] = []
        complete = True
        for name in wanted:
            j = index[name]
            cell = row[j].strip() if j < len(row) else ""
            if cell.lower() in MISSING_TOKENS:
                complete = False
                break
            try:
                parsed.append(float(cell))
            except ValueError:
                raise DataError(
                    f"column {name!r} on line {lineno} is not numeric: {cell!r}"
                ) from None
        if complete:
            kept.append(parsed)
        else:
            dropped += 1
    if not kept:
        raise DataError(
            "no rows remain after dropping missing values in mapped columns"
        )
    if dropped:
        log.info("dropped %d of %d rows with missing mapped values",
                 dropped, dropped + len(kept))

    table = np.asarray(kept, dtype=float)
    r = len(mapping.endogenous)
    k = len(mapping.exogenous)
    y = table[:, 0]
    d = table[:, 1 : 1 + r]
    x = table[:, 1 + r : 1 + r + k]
    z = table[:, 1 + r + k :]
    exog_names = mapping.exogenous
    if add_intercept:
        x = np.column_stack([np.ones(table.shape[0]), x]) if k else np.ones(
            (table.shape[0], 1)
        )
        exog_names = ("const", *mapping.exogenous)
    for j, name in enumerate(mapping.instruments):
        if np.ptp(z[:, j]) == 0.0:
            warnings.warn(
                f"instrument column {name!r} is constant and cannot move "
                "the endogenous variable",
                RuntimeWarning,
                stacklevel=2,
            )
    return Dataset(
        y=y,
        d=d,
        x=x,
        z=z,
        names=ColumnNames(
            outcome=mapping.outcome,
            endogenous=mapping.endogenous,
            exogenous=exog_names,
            instruments=mapping.instruments,
        ),
        dropped_rows=dropped,
    )


# ---------------------------------------------------------------------------
# Card (1995) proximity extract

CARD_ARCHIVE_URL = "https://davidcard.berkeley.edu/data_sets/proximity.zip"
CACHE_DIR_ENV = "IVQR_CACHE_DIR"

# fallback column order of the raw extract, used when the archive's
# codebook cannot be parsed; the codebook inside the archive wins
DEFAULT_CARD_LAYOUT = (
    "id", "nearc2", "nearc4", "nearc4a", "nearc4b", "ed76", "ed66",
    "age76", "daded", "nodaded", "momed", "nomomed", "weight",
    "momdad14", "sinmom14", "step14", "reg661", "reg662", "reg663",
    "reg664", "reg665", "reg666", "reg667", "reg668", "reg669",
    "south66", "work76", "work78", "lwage76", "lwage78", "famed",
    "black", "smsa76r", "smsa78r", "smsa66r", "reg76r", "reg78r",
    "enroll76", "enroll78", "kww", "iq", "marsta76", "marsta78",
    "libcrd14",
)

# derived columns appended by prepare_card_csv: name -> sources, rule
_CARD_DERIVED = {
    "lwage": ("lwage76",),
    "educ": ("ed76",),
    "exper": ("age76", "ed76"),
    "expersq": ("age76", "ed76"),
    "south": ("reg76r",),
    "smsa": ("smsa76r",),
    "smsa66": ("smsa66r",),
}

EXPECTED_CARD_RAW_ROWS = 3613


def default_cache_dir() -> Path:
    """Archive cache directory, overridable via IVQR_CACHE_DIR."""
    env = os.environ.get(CACHE_DIR_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "ivqrfs"


def fetch_card_archive(url: str = CARD_ARCHIVE_URL, cache_dir=None) -> Path:
    """Download the proximity archive once and cache it.

    Returns the local path of the cached archive.  A warm cache is used
    without touching the network, so offline runs keep working after the
    first fetch.

    Raises
    ------
    FetchError
        When the download fails (or returns an empty body) and no
        cached copy exists.
    """
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cache.mkdir(parents=True, exist_ok=True)
    target = cache / Path(urllib.parse.urlparse(url).path).name
    if target.exists() and target.stat().st_size > 0:
        log.info("using cached archive %s", target)
        return target
    partial = target.with_suffix(target.suffix + ".part")
    try:
        with urllib.request.urlopen(url, timeout=60) as resp, open(
            partial, "wb"
        ) as out:
            shutil.copyfileobj(resp, out)
    except OSError as exc:
        partial.unlink(missing_ok=True)
        raise FetchError(
            f"could not download {url} and no cached copy exists; place "
            f"{target.name} under {cache} (override the location with "
            f"{CACHE_DIR_ENV}) or restore network access: {exc}"
        ) from exc
    if partial.stat().st_size == 0:
        partial.unlink(missing_ok=True)
        raise FetchError(f"download of {url} produced an empty file")
    os.replace(partial, target)
    log.info("downloaded %s to %s", url, target)
    return target


def _codebook_layout(text: str) -> tuple[str, ...]:
    """Ordered variable names from codebook lines like ``name  12-17``."""
    names = []
    for line in text.splitlines():
        m = re.match(r"\s*([A-Za-z][A-Za-z0-9_]*)\s+(\d+)\s*-\s*(\d+)\b", line)
        if m:
            names.append(m.group(1).lower())
    return tuple(names)


def prepare_card_csv(archive_path, out_path) -> Path:
    """Convert the raw proximity archive into a headed CSV file.

    The column order comes from the codebook inside the archive when it
    can be parsed, otherwise from the documented fallback layout; either
    way it must match the observed field count.  Derived regression
    columns (log wage, education, potential experience and its square,
    current south/metro indicators) are appended; missing cells stay
    empty so the CSV loader's listwise deletion handles them.

    Raises
    ------
    FetchError
        If the archive is not a readable zip file.
    DataError
        If the data rows are ragged or match no known layout.
    """
    try:
        with zipfile.ZipFile(archive_path) as zf:
            members = zf.namelist()
            dat = [m for m in members if m.lower().endswith(".dat")]
            if len(dat) != 1:
                raise DataError(
                    f"expected exactly one .dat member in {archive_path}, "
                    f"found {dat or members}"
                )
            raw = zf.read(dat[0]).decode("utf-8", errors="replace")
            layout: tuple[str, ...] = ()
            for m in members:
                if m == dat[0]:
                    continue
                parsed = _codebook_layout(
                    zf.read(m).decode("utf-8", errors="replace")
                )
                if len(parsed) > len(layout):
                    layout = parsed
    except zipfile.BadZipFile as exc:
        raise FetchError(
            f"{archive_path} is not a readable zip archive; delete it and "
            "fetch again"
        ) from exc

    rows = [line.split() for line in raw.splitlines() if line.strip()]
    if not rows:
        raise DataError("archive data file holds no rows")
    width = len(rows[0])
    if any(len(row) != width for row in rows):
        raise DataError("archive data rows have inconsistent field counts")
    if len(layout) != width:
        if len(DEFAULT_CARD_LAYOUT) == width:
            layout = DEFAULT_CARD_LAYOUT
        else:
            raise DataError(
                f"data file has {width} fields per row, but the codebook "
                f"gives {len(layout)} names and the fallback layout "
                f"{len(DEFAULT_CARD_LAYOUT)}; the archive format has changed"
            )
    if len(rows) != EXPECTED_CARD_RAW_ROWS:
        log.warning(
            "expected %d raw rows, found %d", EXPECTED_CARD_RAW_ROWS, len(rows)
        )

    col = {name: j for j, name in enumerate(layout)}

    def cell(row, name):
        tok = row[col[name]] if name in col else "."
        return None if tok.lower() in MISSING_TOKENS else float(tok)

    derived_names = [
        name for name, sources in _CARD_DERIVED.items()
        if all(s in col for s in sources)
    ]
    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(layout) + derived_names)
        for row in rows:
            rec = [
                "" if tok.lower() in MISSING_TOKENS else tok for tok in row
            ]
            for name in derived_names:
                if name == "exper" or name == "expersq":
                    age, ed = cell(row, "age76"), cell(row, "ed76")
                    if age is None or ed is None:
                        rec.append("")
                        continue
                    exper = age - ed - 6.0
                    rec.append(repr(exper if name == "exper" else exper**2))
                else:
                    value = cell(row, _CARD_DERIVED[name][0])
                    rec.append("" if value is None else repr(value))
            writer.writerow(rec)
    log.info("wrote %s (%d rows, %d columns)", out_path, len(rows),
             len(layout) + len(derived_names))
    return out_path
