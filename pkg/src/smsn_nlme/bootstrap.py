"""Parametric bootstrap for curve bands, peak-date and total intervals.

Each replicate simulates a panel from the fitted parameters on the
observed time grids, refits the same family from a warm start and records
the fitted-then-predicted daily curve of every subject.  Failed or
non-converged refits are counted and dropped; the replicates whose fitted
values match their own simulated data worst (largest MSE) are trimmed,
and percentile bands are taken over the rest.

Replicate ``k`` draws from ``SeedSequence([seed, k])``, so results do not
depend on how replicates are spread over worker processes.
"""

from __future__ import annotations

import datetime as dt
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data_io import PreparedPanel, Subject
from .estimation import FitResult, ModelError, Theta, fit
from .prediction import conditional_mean
from .smsn_dist import NumericalError, sample_sn_standard

log = logging.getLogger(__name__)


class BandInvariantError(ValueError):
    """Percentile bands that no curve could lie within."""


@dataclass
class BootstrapConfig:
    M: int = 600
    trim_frac: float = 0.15
    alpha: float = 0.05
    seed: int = 0
    condition_on_u: bool = True
    condition_b_on_u: bool = False
    random_effects: str = "conditional"
    workers: int = 1
    horizon_days: int = 300
    horizons: tuple = (30, 60, 90, 150)

    def __post_init__(self):
        if not 0.0 <= self.trim_frac < 0.5:
            raise ValueError(f"trim_frac must be in [0, 0.5), got {self.trim_frac}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.M < 10:
            raise ValueError(f"M must be at least 10, got {self.M}")
        if self.random_effects not in ("conditional", "marginal"):
            raise ValueError(f"random_effects must be 'conditional' or 'marginal', got {self.random_effects!r}")
        if self.workers < 1:
            raise ValueError(f"workers must be positive, got {self.workers}")
        if self.horizon_days < max(self.horizons, default=0):
            raise ValueError("horizon_days must cover every forecast horizon")

    def to_dict(self) -> dict:
        return {"M": self.M, "trim_frac": self.trim_frac, "alpha": self.alpha, "seed": self.seed,
                "condition_on_u": self.condition_on_u,
                "condition_b_on_u": self.condition_b_on_u, "random_effects": self.random_effects,
                "workers": self.workers,
                "horizon_days": self.horizon_days, "horizons": list(self.horizons)}


@dataclass
class SubjectBands:
    """Curves of one subject on its day grid (original scale, unclamped)."""

    name: str
    days: np.ndarray
    dates: list
    n_observed: int
    fitted: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    peak_interval: tuple
    totals: dict
    totals_intervals: dict


@dataclass
class BootstrapResult:
    M: int
    kept: int
    trimmed: int
    failures: list
    subjects: list
    config: BootstrapConfig
    kept_replicates: list = field(default_factory=list)

    @property
    def n_failures(self) -> int:
        return len(self.failures)

    def subject(self, name: str) -> SubjectBands:
        for s in self.subjects:
            if s.name == name:
                return s
        raise KeyError(f"unknown subject {name!r}")

    def to_dict(self) -> dict:
        subs = []
        for s in self.subjects:
            subs.append({"name": s.name, "days": s.days.tolist(), "dates": [d.isoformat() for d in s.dates],
                         "n_observed": s.n_observed, "fitted": s.fitted.tolist(),
                         "band_lo": s.band_lo.tolist(), "band_hi": s.band_hi.tolist(),
                         "peak_interval": [_iso(v) for v in s.peak_interval],
                         "totals": {str(k): v for k, v in s.totals.items()},
                         "totals_intervals": {str(k): list(v) for k, v in s.totals_intervals.items()}})
        return {"M": self.M, "kept": self.kept, "trimmed": self.trimmed, "failures": self.failures,
                "config": self.config.to_dict(), "kept_replicates": list(self.kept_replicates),
                "subjects": subs}

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapResult":
        subs = []
        for s in d["subjects"]:
            dates = [dt.date.fromisoformat(v) for v in s["dates"]]
            subs.append(SubjectBands(s["name"], np.array(s["days"], dtype=float), dates, s["n_observed"],
                                     np.array(s["fitted"]), np.array(s["band_lo"]), np.array(s["band_hi"]),
                                     tuple(_from_iso(v) for v in s["peak_interval"]),
                                     {int(k): v for k, v in s["totals"].items()},
                                     {int(k): tuple(v) for k, v in s["totals_intervals"].items()}))
        return cls(d["M"], d["kept"], d["trimmed"], d["failures"], subs,
                   BootstrapConfig(**{**d["config"], "horizons": tuple(d["config"]["horizons"])}),
                   d.get("kept_replicates", []))


def _iso(v):
    return v.isoformat() if isinstance(v, dt.date) else v


def _from_iso(v):
    return dt.date.fromisoformat(v) if isinstance(v, str) else v


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def simulate_dataset(theta: Theta, design: PreparedPanel, rng: np.random.Generator, u_override=None,
                     curve=None, condition_b_on_u: bool = False, b_fixed=None) -> PreparedPanel:
    """Responses drawn from the model on the time grids of ``design``.

    ``b_i = c Delta + u_i^{-1/2} z_i`` with ``z_i ~ SN_q(0, D, lambda)`` and
    ``e_i ~ N(0, sigma2 / u_i I)``, ``u_i`` drawn from the mixing law.
    With ``u_override`` the errors use ``u_override[i]`` instead, keeping
    each subject's noise level; the random effects keep their own draw of
    ``u_i`` unless ``condition_b_on_u`` is set. ``b_fixed`` (one row per
    subject) holds the random effects at given values instead of drawing them.
    """
    from .curves import GeneralizedLogisticCurve

    curve = curve or GeneralizedLogisticCurve()
    n = len(design)
    u = np.asarray(theta.mixing.sample(rng, n), dtype=float)
    u_b = u
    if u_override is not None:
        u = np.asarray(u_override, dtype=float)
        if u.shape != (n,) or np.any(u <= 0) or not np.all(np.isfinite(u)):
            raise ValueError("u_override needs one positive weight per subject")
        if condition_b_on_u:
            u_b = u
    _, Delta, _ = theta.skew_vectors
    c = theta.c
    subs = []
    for i, s in enumerate(design):
        if b_fixed is None:
            z = sample_sn_standard(theta.D, theta.lam, 1, rng)[0]
            b = c * Delta + z / np.sqrt(u_b[i])
        else:
            b = np.asarray(b_fixed[i], dtype=float)
        e = rng.standard_normal(s.n) * np.sqrt(theta.sigma2 / u[i])
        y = np.asarray(curve.eta(s.t, theta.beta, b)) + e
        subs.append(Subject(s.name, s.t.copy(), y, s.first_death_date, y * design.k_z))
    return PreparedPanel(subs, design.k_z, design.snapshot_date, dict(design.meta))


# ---------------------------------------------------------------------------
# Curves, trimming and intervals
# ---------------------------------------------------------------------------


def curve_path(res: FitResult, i: int, horizon_days: int) -> np.ndarray:
    """Fitted values on observed days followed by predictions, scaled response."""
    s = res.panel.subjects[i]
    fitted = np.asarray(res.curve.eta(s.t, res.theta.beta, res.b_hat[i]))
    last = s.t[-1]
    future = conditional_mean(res.theta, res.curve, s.t, s.y, res.b_hat[i],
                              np.arange(last + 1, last + horizon_days + 1))
    return np.concatenate([fitted, future])


def _horizon_offsets(panel: PreparedPanel, s: Subject, horizons) -> list:
    """Index into a subject's future block for each horizon after the snapshot."""
    gap = 0
    if panel.snapshot_date is not None and s.first_death_date is not None:
        gap = s.day_of(panel.snapshot_date) - int(s.t[-1])
    return [gap + int(h) for h in horizons]


def _totals(base: float, future_original: np.ndarray, offsets) -> list:
    running = np.concatenate([[base], base + np.cumsum(np.maximum(future_original, 0.0))])
    return [float(running[k]) for k in offsets]


def kept_count(M: int, failures: int, trim_frac: float) -> int:
    """Survivors after failures and MSE trimming, rounded half up."""
    if failures > M:
        raise ValueError("more failures than replicates")
    return int(np.floor((M - failures) * (1.0 - trim_frac) + 0.5))


def percentile_band(curves: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise (alpha/2, 1 - alpha/2) percentiles over rows of ``curves``."""
    curves = np.atleast_2d(curves)
    lo, hi = np.percentile(curves, [50.0 * alpha, 100.0 * (1.0 - alpha / 2.0)], axis=0)
    return lo, hi


def peak_interval(band_lo, band_hi, dates=None) -> tuple:
    """Days where the upper band reaches the highest point of the lower band.

    With ``m = max(band_lo)`` the interval runs from the first to the last
    grid point with ``band_hi >= m``; each end moves one day outward when
    the interpolated crossing lies nearer the outer neighbour.  Any curve
    inside the band peaks within the interval.  Returns indices, or dates
    when ``dates`` is given.
    """
    lo = np.asarray(band_lo, dtype=float)
    hi = np.asarray(band_hi, dtype=float)
    if lo.shape != hi.shape or lo.size == 0:
        raise ValueError("bands must be non-empty and of equal length")
    m = float(np.max(lo))
    if not np.isfinite(m):
        raise ValueError("lower band has no finite maximum")
    above = np.flatnonzero(hi >= m)
    if above.size == 0:
        raise BandInvariantError("upper band never reaches the maximum of the lower band")
    first, last = int(above[0]), int(above[-1])
    if first > 0:
        f = (m - hi[first - 1]) / (hi[first] - hi[first - 1])
        if f < 0.5:
            log.debug("peak interval start moved from %d to %d by interpolation", first, first - 1)
            first -= 1
    if last < hi.size - 1:
        f = (hi[last] - m) / (hi[last] - hi[last + 1])
        if f > 0.5:
            log.debug("peak interval end moved from %d to %d by interpolation", last, last + 1)
            last += 1
    if dates is None:
        return first, last
    return dates[first], dates[last]


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------

_WORKER_FIT: FitResult | None = None


def _init_worker(res: FitResult):
    global _WORKER_FIT
    _WORKER_FIT = res


def replicate_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(k)]))


def _replicate(args) -> dict:
    k, cfg = args
    res = _WORKER_FIT
    rng = replicate_rng(cfg.seed, k)
    u = res.u_hat if cfg.condition_on_u else None
    try:
        held = res.b_hat if cfg.random_effects == "conditional" else None
        sim = simulate_dataset(res.theta, res.panel, rng, u, res.curve, cfg.condition_b_on_u, held)
        fcfg = replace(res.config, init_theta=res.theta, init_b=held)
        rep = fit(sim, res.family, fcfg, res.curve)
    except (NumericalError, ModelError, ValueError, np.linalg.LinAlgError) as exc:
        return {"replicate": k, "ok": False, "reason": f"{type(exc).__name__}: {exc}"}
    if not rep.converged:
        return {"replicate": k, "ok": False, "reason": f"no convergence in {rep.iterations} iterations"}
    try:
        resid = np.concatenate([s.y - np.asarray(rep.curve.eta(s.t, rep.theta.beta, b))
                                for s, b in zip(rep.panel, rep.b_hat)])
        paths = [curve_path(rep, i, cfg.horizon_days) for i in range(len(rep.panel))]
    except (NumericalError, ValueError, np.linalg.LinAlgError) as exc:
        return {"replicate": k, "ok": False, "reason": f"{type(exc).__name__}: {exc}"}
    return {"replicate": k, "ok": True, "mse": float(np.mean(resid ** 2)), "paths": paths}


def run_bootstrap(res: FitResult, config: BootstrapConfig | None = None, progress=None) -> BootstrapResult:
    """Parametric bootstrap around a converged fit."""
    cfg = config or BootstrapConfig()
    if not res.converged:
        raise ModelError("bootstrap needs a converged fit")
    tasks = [(k, cfg) for k in range(cfg.M)]
    if cfg.workers == 1:
        _init_worker(res)
        outcomes = []
        for task in tasks:
            outcomes.append(_replicate(task))
            if progress:
                progress(len(outcomes), cfg.M)
    else:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(res,)) as pool:
            outcomes = []
            for out in pool.map(_replicate, tasks, chunksize=max(1, cfg.M // (4 * cfg.workers))):
                outcomes.append(out)
                if progress:
                    progress(len(outcomes), cfg.M)
    return summarize(res, outcomes, cfg)


def summarize(res: FitResult, outcomes: list, cfg: BootstrapConfig) -> BootstrapResult:
    """Trim, take percentiles and build intervals from replicate outcomes."""
    outcomes = sorted(outcomes, key=lambda o: o["replicate"])
    failures = [{"replicate": o["replicate"], "reason": o["reason"]} for o in outcomes if not o["ok"]]
    good = [o for o in outcomes if o["ok"]]
    n_keep = kept_count(len(outcomes), len(failures), cfg.trim_frac)
    # stable sort: ties keep replicate order
    order = sorted(range(len(good)), key=lambda j: good[j]["mse"])
    kept = sorted(order[:n_keep])
    if n_keep < 10:
        raise ModelError(f"only {n_keep} replicates kept ({len(failures)} failures of {len(outcomes)}); "
                         f"first reasons: {[f['reason'] for f in failures[:3]]}")
    k_z = res.panel.k_z
    subjects = []
    for i, s in enumerate(res.panel.subjects):
        curves = np.array([good[j]["paths"][i] for j in kept]) * k_z
        lo, hi = percentile_band(curves, cfg.alpha)
        days = np.concatenate([s.t, np.arange(s.t[-1] + 1, s.t[-1] + cfg.horizon_days + 1)])
        dates = [s.date_of(d) for d in days] if s.first_death_date is not None else []
        fitted = curve_path(res, i, cfg.horizon_days) * k_z
        pk = peak_interval(np.maximum(lo, 0.0), np.maximum(hi, 0.0), dates or None)
        offsets = _horizon_offsets(res.panel, s, cfg.horizons)
        base = s.observed_total if s.z is not None else float(s.y.sum() * k_z)
        point = _totals(base, fitted[s.n:], offsets)
        reps = np.array([_totals(base, c[s.n:], offsets) for c in curves])
        tlo, thi = percentile_band(reps, cfg.alpha)
        subjects.append(SubjectBands(
            s.name, days, dates, s.n, fitted, lo, hi, pk,
            {int(h): v for h, v in zip(cfg.horizons, point)},
            {int(h): (float(a), float(b)) for h, a, b in zip(cfg.horizons, tlo, thi)}))
    return BootstrapResult(len(outcomes), n_keep, len(good) - n_keep, failures, subjects, cfg,
                           [good[j]["replicate"] for j in kept])
