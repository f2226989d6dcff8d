"""Death-count ingestion and the prepared panel.

Reads the Johns Hopkins CSSE wide time-series CSV (``Province/State,
Country/Region, Lat, Long, m/d/yy...``) or a long CSV with columns
``region,date,cumulative_deaths``, turns cumulative counts into daily
counts aligned at each region's first death, and divides by a scaling
constant ``k_z`` for numerical stability.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

JHU_ID_COLUMNS = ["Province/State", "Country/Region", "Lat", "Long"]
LONG_COLUMNS = ["region", "date", "cumulative_deaths"]

FIXTURE_NAME = "synthetic_deaths_global_2020-06-24.csv"
FIXTURE_ENV = "SMSN_NLME_FIXTURE_DIR"

STUDY_COUNTRIES = ["Belgium", "Italy", "United Kingdom", "US", "Brazil",
                   "Mexico", "Peru", "Chile", "Colombia"]


def fixture_path(name: str = FIXTURE_NAME) -> Path:
    """Path of a bundled data file; ``$SMSN_NLME_FIXTURE_DIR`` overrides the directory."""
    root = os.environ.get(FIXTURE_ENV)
    base = Path(root) if root else Path(__file__).resolve().parent / "data"
    return base / name


class ParseError(ValueError):
    """Malformed input file; the message names the offending line."""


@dataclass
class RawSeries:
    region: str
    dates: list
    cumulative: np.ndarray
    province: str = ""

    def __post_init__(self):
        self.cumulative = np.asarray(self.cumulative, dtype=np.int64)
        if len(self.dates) != self.cumulative.size:
            raise ValueError("dates and cumulative counts differ in length")
        steps = np.diff(np.array([d.toordinal() for d in self.dates]))
        if steps.size and np.any(steps != 1):
            raise ValueError(f"{self.region}: dates must be consecutive days")

    def through(self, last: dt.date) -> "RawSeries":
        keep = [i for i, d in enumerate(self.dates) if d <= last]
        return RawSeries(self.region, [self.dates[i] for i in keep], self.cumulative[keep], self.province)


@dataclass
class Subject:
    """One region's daily series starting at its first death (t = 0)."""

    name: str
    t: np.ndarray
    y: np.ndarray
    first_death_date: dt.date | None = None
    z: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.t.shape != self.y.shape or self.t.ndim != 1:
            raise ValueError(f"{self.name}: t and y must be 1-d arrays of equal length")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float)

    @property
    def n(self) -> int:
        return self.t.size

    def date_of(self, day: float) -> dt.date:
        if self.first_death_date is None:
            raise ValueError(f"{self.name} has no calendar anchor")
        return self.first_death_date + dt.timedelta(days=int(round(day)))

    def day_of(self, date: dt.date) -> int:
        if self.first_death_date is None:
            raise ValueError(f"{self.name} has no calendar anchor")
        return (date - self.first_death_date).days

    @property
    def observed_total(self) -> float:
        """Observed cumulative count on the original scale at the last day."""
        if self.z is None:
            raise ValueError(f"{self.name} carries no raw counts")
        return float(self.z.sum())


@dataclass
class PreparedPanel:
    subjects: list
    k_z: float = 1.0
    snapshot_date: dt.date | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def names(self) -> list:
        return [s.name for s in self.subjects]

    @property
    def n_obs(self) -> int:
        return int(sum(s.n for s in self.subjects))

    def subject(self, name: str) -> Subject:
        for s in self.subjects:
            if s.name == name:
                return s
        raise KeyError(f"unknown subject {name!r}; available: {', '.join(self.names)}")

    def sorted(self) -> "PreparedPanel":
        return PreparedPanel(sorted(self.subjects, key=lambda s: s.name), self.k_z,
                             self.snapshot_date, dict(self.meta))

    def with_responses(self, ys) -> "PreparedPanel":
        """Copy of the panel with new scaled responses (same designs)."""
        subs = [Subject(s.name, s.t.copy(), np.asarray(y, dtype=float), s.first_death_date,
                        None if s.z is None else s.z.copy())
                for s, y in zip(self.subjects, ys)]
        return PreparedPanel(subs, self.k_z, self.snapshot_date, dict(self.meta))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_us_date(text: str, lineno: int) -> dt.date:
    try:
        return dt.datetime.strptime(text.strip(), "%m/%d/%y").date()
    except ValueError:
        raise ParseError(f"line {lineno}: bad date column header {text!r} (expected m/d/yy)") from None


def _read_text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        return data.decode("utf-8-sig")
    return str(data).lstrip("﻿")


def parse_jhu_wide(data, aggregate: bool = True) -> list:
    """Parse a JHU CSSE wide time-series CSV.

    Returns one :class:`RawSeries` per row, or per country when
    ``aggregate`` is true (provinces summed column-wise).
    """
    rows = list(csv.reader(io.StringIO(_read_text(data))))
    if not rows:
        raise ParseError("line 1: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:4] != JHU_ID_COLUMNS:
        raise ParseError(f"line 1: expected header to start with {JHU_ID_COLUMNS}, got {header[:4]}")
    if len(header) == 4:
        raise ParseError("line 1: no date columns")
    dates = [_parse_us_date(h, 1) for h in header[4:]]
    if any((b - a).days != 1 for a, b in zip(dates, dates[1:])):
        raise ParseError("line 1: date columns are not consecutive days")
    series = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            counts = [int(float(c)) if c.strip() else 0 for c in row[4:]]
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric count") from None
        series.append(RawSeries(row[1].strip(), dates, counts, row[0].strip()))
    if not aggregate:
        return series
    return aggregate_countries(series)


def aggregate_countries(series: list) -> list:
    """Sum province rows into one series per country (sorted by name)."""
    totals: dict = {}
    for s in series:
        if s.region in totals:
            prev = totals[s.region]
            if prev.dates != s.dates:
                raise ValueError(f"{s.region}: province rows cover different dates")
            prev.cumulative = prev.cumulative + s.cumulative
        else:
            totals[s.region] = RawSeries(s.region, list(s.dates), s.cumulative.copy())
    return [totals[k] for k in sorted(totals)]


def parse_long(data) -> list:
    """Parse ``region,date,cumulative_deaths`` rows (ISO dates)."""
    reader = csv.reader(io.StringIO(_read_text(data)))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("line 1: empty file") from None
    if header != LONG_COLUMNS:
        raise ParseError(f"line 1: expected columns {LONG_COLUMNS}, got {header}")
    by_region: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            day = dt.date.fromisoformat(row[1].strip())
            count = int(float(row[2]))
        except ValueError:
            raise ParseError(f"line {lineno}: bad date or count in {row}") from None
        by_region.setdefault(row[0].strip(), {})[day] = by_region.get(row[0].strip(), {}).get(day, 0) + count
    out = []
    for region in sorted(by_region):
        days = sorted(by_region[region])
        full = [days[0] + dt.timedelta(days=k) for k in range((days[-1] - days[0]).days + 1)]
        if len(full) != len(days):
            raise ParseError(f"{region}: missing dates between {days[0]} and {days[-1]}")
        out.append(RawSeries(region, full, [by_region[region][d] for d in full]))
    return out


def read_series(path, fmt: str = "jhu") -> list:
    raw = Path(path).read_bytes()
    if fmt == "jhu":
        return parse_jhu_wide(raw)
    if fmt == "long":
        return parse_long(raw)
    raise ValueError(f"unknown format {fmt!r}; expected 'jhu' or 'long'")


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def clean_cumulative(cumulative) -> np.ndarray:
    """Remove downward reporting corrections with a running maximum."""
    c = np.maximum(np.asarray(cumulative, dtype=np.int64), 0)
    return np.maximum.accumulate(c) if c.size else c


def to_daily_since_first_death(series: RawSeries):
    """Daily counts from the first day with at least one cumulative death.

    Returns ``(t, z, first_date)``, or ``None`` when the series never
    records a death.
    """
    c = clean_cumulative(series.cumulative)
    hits = np.flatnonzero(c >= 1)
    if hits.size == 0:
        return None
    first = int(hits[0])
    z = np.diff(np.concatenate([[0], c]))[first:]
    return np.arange(z.size, dtype=float), z.astype(float), series.dates[first]


def build_panel(series: list, countries: list | None = None, through: dt.date | None = None,
                k_z: float | None = None) -> PreparedPanel:
    """Select regions, align at first death and scale."""
    by_name = {s.region: s for s in series}
    if countries:
        missing = [c for c in countries if c not in by_name]
        if missing:
            raise KeyError(f"unknown region(s) {missing}; available: {', '.join(sorted(by_name))}")
        chosen = [by_name[c] for c in countries]
    else:
        chosen = list(series)
    subjects = []
    snapshot = None
    for s in chosen:
        if through is not None:
            s = s.through(through)
        if not s.dates:
            continue
        snapshot = max(snapshot, s.dates[-1]) if snapshot else s.dates[-1]
        daily = to_daily_since_first_death(s)
        if daily is None:
            log.info("%s has no deaths in range; excluded", s.region)
            continue
        t, z, first = daily
        subjects.append(Subject(s.region, t, z.copy(), first, z))
    if not subjects:
        raise ValueError("panel is empty: no selected region has a death in the requested range")
    panel = PreparedPanel(subjects, 1.0, snapshot)
    return scale_panel(panel, k_z)


def auto_k_z(panel: PreparedPanel) -> tuple[float, str]:
    """Smallest per-subject sample standard deviation of the daily counts."""
    sds = {s.name: float(np.std(s.z if s.z is not None else s.y, ddof=1)) for s in panel if s.n > 1}
    if not sds:
        raise ValueError("cannot choose k_z: no subject has two or more days")
    name = min(sds, key=sds.get)
    return sds[name], name


def scale_panel(panel: PreparedPanel, k_z: float | None = None) -> PreparedPanel:
    """Divide the raw daily counts by ``k_z`` (chosen automatically if None)."""
    if not len(panel):
        raise ValueError("panel is empty")
    meta = dict(panel.meta)
    if k_z is None:
        k_z, ref = auto_k_z(panel)
        meta["k_z_reference"] = ref
    if not (np.isfinite(k_z) and k_z > 0):
        raise ValueError(f"k_z must be positive, got {k_z}")
    subs = []
    for s in panel:
        raw = s.z if s.z is not None else s.y * panel.k_z
        subs.append(Subject(s.name, s.t.copy(), raw / k_z, s.first_death_date, raw.copy()))
    return PreparedPanel(subs, float(k_z), panel.snapshot_date, meta)


def unscale(values, panel: PreparedPanel):
    return np.asarray(values, dtype=float) * panel.k_z


# ---------------------------------------------------------------------------
# Panel files: one JSON header line, then CSV rows
# ---------------------------------------------------------------------------


def panel_to_text(panel: PreparedPanel, manifest: dict | None = None) -> str:
    header = {
        "k_z": panel.k_z,
        "snapshot_date": panel.snapshot_date.isoformat() if panel.snapshot_date else None,
        "subjects": [[s.name, s.first_death_date.isoformat() if s.first_death_date else None]
                     for s in panel],
        "meta": panel.meta,
    }
    if manifest is not None:
        header["manifest"] = manifest
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "t", "z", "y"])
    for s in panel:
        z = s.z if s.z is not None else np.full(s.n, np.nan)
        for t, zz, y in zip(s.t, z, s.y):
            w.writerow([s.name, repr(float(t)), repr(float(zz)), repr(float(y))])
    return buf.getvalue()


def panel_from_text(text: str) -> PreparedPanel:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ParseError("line 1: missing JSON header")
    try:
        header = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise ParseError(f"line 1: bad JSON header ({exc})") from None
    reader = csv.reader(lines[1:])
    cols = next(reader)
    if cols != ["subject", "t", "z", "y"]:
        raise ParseError(f"line 2: unexpected columns {cols}")
    data: dict = {name: ([], [], []) for name, _ in header["subjects"]}
    for lineno, row in enumerate(reader, start=3):
        if row[0] not in data:
            raise ParseError(f"line {lineno}: subject {row[0]!r} not declared in header")
        for lst, v in zip(data[row[0]], row[1:]):
            lst.append(float(v))
    subs = []
    for name, first in header["subjects"]:
        t, z, y = (np.array(v) for v in data[name])
        subs.append(Subject(name, t, y, dt.date.fromisoformat(first) if first else None,
                            None if np.all(np.isnan(z)) else z))
    snap = header.get("snapshot_date")
    return PreparedPanel(subs, float(header["k_z"]), dt.date.fromisoformat(snap) if snap else None,
                         header.get("meta", {}))


def write_panel(panel: PreparedPanel, path, manifest: dict | None = None) -> None:
    Path(path).write_text(panel_to_text(panel, manifest))


def read_panel(path) -> PreparedPanel:
    return panel_from_text(Path(path).read_text())
