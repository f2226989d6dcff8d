"""Batch command-line interface.

    smsn-nlme prepare   --input PATH --format jhu|long --countries LIST --through DATE --out PATH
    smsn-nlme fit       --panel PATH --family n|sn|t|st [--config INI] --out PATH
    smsn-nlme select    --panel PATH --families n,sn,t,st [--config INI] --out PATH
    smsn-nlme predict   --fit PATH --horizons 30,60,90,150 --out PATH
    smsn-nlme bootstrap --fit PATH [--M 600 --trim 0.15 --alpha 0.05 --seed N --workers K] --out PATH
    smsn-nlme report    --fit PATH [--bootstrap PATH] --out DIR

Tables are delimited text whose first line is ``# {json header}`` carrying
the run manifest; fit and bootstrap results are JSON with a ``manifest``
key.  The manifest timestamp honours ``SOURCE_DATE_EPOCH`` so that repeated
runs can be byte-identical.  Exit codes: 0 success, 1 model or numerical
failure, 2 usage or I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BandInvariantError, BootstrapConfig, BootstrapResult, run_bootstrap
from .data_io import STUDY_COUNTRIES, ParseError, build_panel, fixture_path, read_panel, read_series, write_panel
from .estimation import FitConfig, ModelError, fit, fit_from_dict, fit_to_dict, model_selection
from .prediction import forecast_table
from .report import write_report
from .smsn_dist import NumericalError

log = logging.getLogger("smsn_nlme")

EXIT_OK, EXIT_MODEL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Manifest and file helpers
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch else dt.datetime.now(dt.timezone.utc)
    return now.replace(microsecond=0).isoformat()


def make_manifest(command: str, config: dict, inputs: dict, seed=None, **extra) -> dict:
    """Run manifest: command, config hash, input checksums, seed, version, timestamp."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    m = {"command": command, "config": config, "config_hash": hashlib.sha256(blob).hexdigest(),
         "inputs": {k: sha256_file(v) for k, v in sorted(inputs.items())}, "seed": seed,
         "software": f"smsn_nlme {__version__}", "created": _timestamp()}
    m.update(extra)
    return m


def write_table(path, columns: list, rows: list, manifest: dict) -> None:
    buf = io.StringIO()
    buf.write("# " + json.dumps({"manifest": manifest, "columns": columns}, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    _write_text(path, buf.getvalue())


def read_table(path) -> tuple[dict, list]:
    """Header dict and rows of a delimited output file."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ParseError(f"{path}: missing JSON header line")
    return json.loads(lines[0][2:]), list(csv.DictReader(lines[1:]))


def _cell(v):
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return "" if v is None else v


def _write_text(path, text: str) -> None:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def _write_json(path, obj: dict) -> None:
    _write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a JSON file ({exc})") from None


def _csv_list(text: str, conv=str) -> list:
    items = [x.strip() for x in text.split(",") if x.strip()]
    try:
        return [conv(x) for x in items]
    except ValueError:
        raise UsageError(f"bad list value {text!r}") from None


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

_FIT_SKIP = {"init_theta", "init_b", "nu_bounds"}


def _convert(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[value.strip().lower()]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple) or default is None:
            return tuple(float(x) for x in value.split(",") if x.strip())
        return value.strip()
    except (ValueError, KeyError):
        raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None


def _section_to(cls, section, skip=()) -> dict:
    defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                for f in dataclasses.fields(cls) if f.name not in skip}
    # configparser lowercases keys
    names = {k.lower(): k for k in defaults}
    out = {}
    for key, value in section.items():
        if key not in names:
            raise UsageError(f"unknown config key {key!r} in [{section.name}]; known: {', '.join(sorted(defaults))}")
        out[names[key]] = _convert(value, defaults[names[key]], key)
    if "horizons" in out:
        out["horizons"] = tuple(int(h) for h in out["horizons"])
    return out


def load_config(path) -> tuple[FitConfig, dict]:
    """FitConfig and BootstrapConfig overrides from an INI file with [fit]/[bootstrap] sections."""
    if path is None:
        return FitConfig(), {}
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    extra = set(cp.sections()) - {"fit", "bootstrap"}
    if extra:
        raise UsageError(f"{path}: unknown section(s) {sorted(extra)}")
    fit_kw = _section_to(FitConfig, cp["fit"], _FIT_SKIP) if cp.has_section("fit") else {}
    boot_kw = _section_to(BootstrapConfig, cp["bootstrap"]) if cp.has_section("bootstrap") else {}
    try:
        return FitConfig(**fit_kw), boot_kw
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    src = Path(args.input) if args.input else fixture_path()
    countries = _csv_list(args.countries) if args.countries else list(STUDY_COUNTRIES)
    through = _date(args.through) if args.through else None
    series = read_series(src, args.format)
    panel = build_panel(series, countries, through, args.k_z)
    manifest = make_manifest("prepare", {"format": args.format, "countries": countries,
                                         "through": args.through, "k_z": args.k_z},
                             {"input": src}, n_subjects=len(panel))
    write_panel(panel, args.out, manifest)
    log.info("wrote %s: %d subjects, k_z = %g", args.out, len(panel), panel.k_z)
    return EXIT_OK


def cmd_fit(args) -> int:
    panel = read_panel(args.panel)
    cfg, _ = load_config(args.config)
    res = fit(panel, args.family, cfg)
    out = fit_to_dict(res)
    out["manifest"] = make_manifest("fit", {"family": args.family, "fit": cfg.to_dict()},
                                    _inputs(panel=args.panel, config=args.config), p=res.n_params)
    _write_json(args.out, out)
    if not res.converged:
        log.warning("fit did not converge after %d iterations", res.iterations)
    log.info("%s: loglik %.3f, AIC %.2f, BIC %.2f, p = %d", res.family.name, res.loglik, res.aic, res.bic,
             res.n_params)
    return EXIT_OK


def cmd_select(args) -> int:
    families = _csv_list(args.families)
    if not families:
        raise UsageError("--families needs at least one family")
    panel = read_panel(args.panel)
    cfg, _ = load_config(args.config)
    rows = model_selection(panel, families, cfg)
    by_bic = sorted(rows, key=lambda r: (r.bic, r.aic, r.n_params))
    out = []
    for rank, r in enumerate(rows, start=1):
        out.append({"family": r.family, "loglik": float(r.loglik), "aic": float(r.aic), "bic": float(r.bic),
                    "p": r.n_params, "converged": r.converged, "rank_aic": rank,
                    "rank_bic": by_bic.index(r) + 1, "error": r.error or ""})
    manifest = make_manifest("select", {"families": families, "fit": cfg.to_dict()},
                             _inputs(panel=args.panel, config=args.config))
    write_table(args.out, ["family", "loglik", "aic", "bic", "p", "converged", "rank_aic", "rank_bic", "error"],
                out, manifest)
    if all(r.error for r in rows):
        log.error("every family failed")
        return EXIT_MODEL
    return EXIT_OK


def cmd_predict(args) -> int:
    horizons = _csv_list(args.horizons, int)
    if not horizons or any(h < 0 for h in horizons):
        raise UsageError("--horizons must be non-negative integers")
    res = fit_from_dict(_read_json(args.fit))
    rows = forecast_table(res, horizons)
    manifest = make_manifest("predict", {"horizons": horizons}, {"fit": args.fit})
    write_table(args.out, ["subject", "horizon", "date", "total"], rows, manifest)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    _, boot_kw = load_config(args.config)
    for key, val in (("M", args.M), ("trim_frac", args.trim), ("alpha", args.alpha), ("seed", args.seed),
                     ("workers", args.workers), ("horizon_days", args.horizon_days),
                     ("random_effects", args.random_effects)):
        if val is not None:
            boot_kw[key] = val
    if args.horizons is not None:
        boot_kw["horizons"] = tuple(_csv_list(args.horizons, int))
    try:
        cfg = BootstrapConfig(**boot_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    res = fit_from_dict(_read_json(args.fit))

    def progress(k, m):
        if k % max(1, m // 10) == 0 or k == m:
            log.info("bootstrap: %d/%d replicates", k, m)

    boot = run_bootstrap(res, cfg, progress)
    # worker count does not change results, so it stays out of the config hash
    cfg_d = {k: v for k, v in cfg.to_dict().items() if k != "workers"}
    manifest = make_manifest("bootstrap", cfg_d, _inputs(fit=args.fit, config=args.config), seed=cfg.seed)
    out = boot.to_dict()
    out["manifest"] = manifest
    _write_json(args.out, out)
    stem = Path(args.out).with_suffix("")
    band_rows, int_rows = [], []
    for s in boot.subjects:
        for k, d in enumerate(s.dates):
            band_rows.append({"subject": s.name, "date": d.isoformat(), "fitted": float(s.fitted[k]),
                              "band_lo": float(s.band_lo[k]), "band_hi": float(s.band_hi[k])})
        row = {"subject": s.name, "peak_lo": _iso(s.peak_interval[0]), "peak_hi": _iso(s.peak_interval[1])}
        for h in cfg.horizons:
            row[f"total_{h}"] = float(s.totals[h])
            row[f"total_{h}_lo"], row[f"total_{h}_hi"] = (float(v) for v in s.totals_intervals[h])
        int_rows.append(row)
    write_table(f"{stem}_bands.csv", ["subject", "date", "fitted", "band_lo", "band_hi"], band_rows, manifest)
    cols = ["subject", "peak_lo", "peak_hi"] + [f"total_{h}{x}" for h in cfg.horizons for x in ("", "_lo", "_hi")]
    write_table(f"{stem}_intervals.csv", cols, int_rows, manifest)
    log.info("bootstrap: kept %d of %d (%d failures, %d trimmed)", boot.kept, boot.M, boot.n_failures,
             boot.trimmed)
    return EXIT_OK


def cmd_report(args) -> int:
    res = fit_from_dict(_read_json(args.fit))
    boot = BootstrapResult.from_dict(_read_json(args.bootstrap)) if args.bootstrap else None
    manifest = make_manifest("report", {"horizon_days": args.horizon_days},
                             _inputs(fit=args.fit, bootstrap=args.bootstrap))
    horizon = boot.config.horizon_days if boot is not None else args.horizon_days
    paths = write_report(res, args.out, boot, manifest, charts=not args.no_charts, horizon_days=horizon)
    log.info("wrote %d files to %s", len(paths), args.out)
    return EXIT_OK


def _inputs(**paths) -> dict:
    return {k: v for k, v in paths.items() if v}


def _iso(v):
    return v.isoformat() if isinstance(v, dt.date) else v


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise UsageError(f"bad date {text!r}; expected YYYY-MM-DD") from None


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smsn-nlme", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a prepared panel from a deaths file")
    p.add_argument("--input", help="deaths file (default: bundled fixture, see $SMSN_NLME_FIXTURE_DIR)")
    p.add_argument("--format", choices=["jhu", "long"], default="jhu")
    p.add_argument("--countries", help="comma-separated region names (default: the nine study countries)")
    p.add_argument("--through", help="last date to include, YYYY-MM-DD")
    p.add_argument("--k-z", dest="k_z", type=float, help="scaling constant (default: automatic)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("fit", help="fit one family")
    p.add_argument("--panel", required=True)
    p.add_argument("--family", choices=["n", "sn", "t", "st"], default="st")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="fit several families and rank them")
    p.add_argument("--panel", required=True)
    p.add_argument("--families", default="n,sn,t,st")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("predict", help="cumulative forecasts at horizons after the snapshot")
    p.add_argument("--fit", required=True)
    p.add_argument("--horizons", default="30,60,90,150")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bootstrap", help="parametric bootstrap bands")
    p.add_argument("--fit", required=True)
    p.add_argument("--M", type=int)
    p.add_argument("--trim", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--horizon-days", dest="horizon_days", type=int)
    p.add_argument("--horizons", help="comma-separated total-forecast horizons (default 30,60,90,150)")
    p.add_argument("--random-effects", dest="random_effects", choices=["conditional", "marginal"],
                   help="hold each subject's random effects at their estimates, or redraw them")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("report", help="per-subject plot data and SVG charts")
    p.add_argument("--fit", required=True)
    p.add_argument("--bootstrap")
    p.add_argument("--horizon-days", dest="horizon_days", type=int, default=300)
    p.add_argument("--no-charts", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ModelError, NumericalError, BandInvariantError, np.linalg.LinAlgError) as exc:
        log.error("%s", exc)
        return EXIT_MODEL
    except UsageError as exc:
        log.error("usage: %s", exc)
        return EXIT_USAGE
    except (OSError, ParseError, KeyError, ValueError) as exc:
        log.error("%s", exc.args[0] if isinstance(exc, KeyError) and exc.args else exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
