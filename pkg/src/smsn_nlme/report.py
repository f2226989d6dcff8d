"""Per-subject plot data and static SVG charts.

Each subject gets a delimited table ``date,observed,fitted,band_lo,band_hi``
on its day grid (observed days followed by the forecast horizon) and an
SVG chart drawn from that table.  Without a bootstrap result the band
columns are empty and the charts show the curves alone.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import warnings
from pathlib import Path

import numpy as np

from .bootstrap import BootstrapResult, curve_path
from .estimation import FitResult

log = logging.getLogger(__name__)

COLUMNS = ["date", "observed", "fitted", "band_lo", "band_hi"]
DEFAULT_HORIZON = 300


def slug(name: str) -> str:
    """File-name stem for a subject name."""
    s = re.sub(r"[^0-9A-Za-z]+", "_", name).strip("_")
    return s or "subject"


def subject_table(fit: FitResult, name: str, boot: BootstrapResult | None = None,
                  horizon_days: int = DEFAULT_HORIZON) -> dict:
    """Plot data for one subject on the original scale.

    Returns a dict with ``dates``, ``observed`` (NaN after the last
    observation), ``fitted``, ``band_lo``/``band_hi`` (None without a
    bootstrap) and ``peak_interval`` (None without a bootstrap).
    """
    i = fit.subject_index(name)
    s = fit.panel.subjects[i]
    if s.first_death_date is None:
        raise ValueError(f"{name}: subject has no calendar dates")
    if boot is not None:
        sb = boot.subject(name)
        days, fitted = sb.days, sb.fitted
        lo, hi, peak = sb.band_lo, sb.band_hi, sb.peak_interval
    else:
        days = np.concatenate([s.t, np.arange(s.t[-1] + 1, s.t[-1] + horizon_days + 1)])
        fitted = curve_path(fit, i, horizon_days) * fit.panel.k_z
        lo = hi = peak = None
    raw = s.z if s.z is not None else s.y * fit.panel.k_z
    observed = np.full(days.size, np.nan)
    observed[:s.n] = raw
    return {"dates": [s.date_of(d) for d in days], "observed": observed, "fitted": np.asarray(fitted),
            "band_lo": lo, "band_hi": hi, "peak_interval": peak}


def _fmt(v) -> str:
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def table_to_text(name: str, table: dict, manifest: dict | None = None) -> str:
    pk = table["peak_interval"]
    header = {"subject": name, "columns": COLUMNS,
              "peak_interval": [d.isoformat() for d in pk] if pk else None}
    if manifest is not None:
        header["manifest"] = manifest
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    lo, hi = table["band_lo"], table["band_hi"]
    for k, d in enumerate(table["dates"]):
        w.writerow([d.isoformat(), _fmt(table["observed"][k]), _fmt(table["fitted"][k]),
                    _fmt(lo[k] if lo is not None else None), _fmt(hi[k] if hi is not None else None)])
    return buf.getvalue()


def read_table(path) -> tuple[dict, list]:
    """Header dict and rows (list of column dicts) of a written plot-data file."""
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0][2:])
    rows = list(csv.DictReader(lines[1:]))
    return header, rows


def render_svg(name: str, table: dict) -> str:
    """SVG chart: observed counts, fitted/predicted curve, band, peak interval."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.dates as mdates
    import matplotlib.pyplot as plt

    # fixed ids and no timestamp keep the output byte-identical across runs
    with matplotlib.rc_context({"svg.hashsalt": "smsn-nlme", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(8, 4.5))
        dates = table["dates"]
        if table["band_lo"] is not None:
            ax.fill_between(dates, np.maximum(table["band_lo"], 0), np.maximum(table["band_hi"], 0),
                            color="tab:blue", alpha=0.25, lw=0, label="bootstrap band")
        pk = table["peak_interval"]
        if pk is not None:
            span = ax.axvspan(pk[0], pk[1], color="tab:red", alpha=0.15, lw=0, label="peak interval")
            span.set_gid("peak-interval")
        ax.plot(dates, table["observed"], ".", color="0.3", ms=3, label="observed")
        ax.plot(dates, np.maximum(table["fitted"], 0), "-", color="tab:blue", lw=1.5, label="fitted / predicted")
        ax.set_title(name)
        ax.set_ylabel("daily deaths")
        ax.xaxis.set_major_formatter(mdates.DateFormatter("%Y-%m-%d"))
        fig.autofmt_xdate()
        ax.legend(loc="upper right", fontsize=8)
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def write_report(fit: FitResult, out_dir, boot: BootstrapResult | None = None, manifest: dict | None = None,
                 charts: bool = True, horizon_days: int = DEFAULT_HORIZON) -> list:
    """Write ``<subject>.csv`` (and ``<subject>.svg``) for every subject; return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if boot is None:
        msg = "no bootstrap result: writing curves without bands"
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
    paths = []
    for name in fit.panel.names:
        table = subject_table(fit, name, boot, horizon_days)
        p = out / f"{slug(name)}.csv"
        p.write_text(table_to_text(name, table, manifest))
        paths.append(p)
        if charts:
            q = out / f"{slug(name)}.svg"
            q.write_text(render_svg(name, table))
            paths.append(q)
    return paths
