"""Conditional-mean prediction of future observations.

Given the fitted model and a subject's observed series, the future vector
``y+`` is predicted by ``E{y+ | y}`` under the linearized joint law of
``(y, y+)``: an SMSN law whose dispersion is built from the stacked
random-effects design ``[H; H+]`` and whose skewness vector is the
marginal skewness of that stacked linear model.  Conditioning an SMSN
vector on its first block gives

    E{y+ | y} = mu_21 + Psi_221 v2 / sqrt(1 + v2' Psi_221 v2) * tau_m1

with ``(v1, v2) = Psi*^{-1/2} lambda_bar*`` and ``tau_m1`` the mixing
weight evaluated at the skew argument of the marginal law of ``y``.
All arithmetic is on the scaled response; the reporting helpers multiply
by ``k_z`` and clamp negative daily values at zero.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .estimation import FitResult, Theta, _LowRank
from .smsn_dist import _weights_core


@dataclass
class PredictPartition:
    """Blocks of the joint law of (y_i, y+_i) for one subject."""

    H_plus: np.ndarray
    Psi_star_11: np.ndarray
    Psi_star_12: np.ndarray
    Psi_star_21: np.ndarray
    Psi_star_22: np.ndarray
    Psi_22_1: np.ndarray
    mu_21: np.ndarray
    upsilon1: np.ndarray
    upsilon2: np.ndarray
    upsilon_tilde: np.ndarray
    tau_m1: float

    @property
    def mean(self) -> np.ndarray:
        v2 = self.upsilon2
        if not np.any(v2):
            return self.mu_21.copy()
        Pv = self.Psi_22_1 @ v2
        return self.mu_21 + Pv / np.sqrt(1.0 + v2 @ Pv) * self.tau_m1


@dataclass
class Prediction:
    """Predicted daily values for one subject."""

    subject: str
    t: np.ndarray
    scaled: np.ndarray
    original: np.ndarray
    dates: list

    @property
    def reported(self) -> np.ndarray:
        """Original-scale values with negative predictions shown as zero."""
        return np.maximum(self.original, 0.0)


def partition(theta: Theta, curve, t, y, b_tilde, t_plus) -> PredictPartition:
    """Joint-law blocks and the predictor pieces for one subject.

    ``b_tilde`` is the expansion point of the linearization (the final
    empirical Bayes estimate of a fit).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    t_plus = np.atleast_1d(np.asarray(t_plus, dtype=float))
    b_tilde = np.asarray(b_tilde, dtype=float)
    beta, D, s2 = theta.beta, theta.D, theta.sigma2
    _, Delta, zeta = theta.skew_vectors
    c = theta.c

    eta = np.asarray(curve.eta(t, beta, b_tilde))
    H = curve.jacobians(t, beta, b_tilde)[1]
    eta_p = np.asarray(curve.eta(t_plus, beta, b_tilde))
    Hp = curve.jacobians(t_plus, beta, b_tilde)[1]
    shift = b_tilde - c * Delta
    r1 = y - eta + H @ shift

    psi11 = _LowRank(H, D, s2)
    P12 = H @ D @ Hp.T
    P11_inv_P12 = psi11.solve(P12)
    mu_21 = eta_p - Hp @ shift + P12.T @ psi11.solve(r1)
    # Psi22 - Psi21 Psi11^{-1} Psi12 = s2 (I + H+ Q H+'), Q from the observed block
    P22_1 = s2 * (np.eye(t_plus.size) + Hp @ psi11.Q @ Hp.T)
    P22_1 = (P22_1 + P22_1.T) / 2.0

    # Psi*^{-1/2} lambda_bar* = Psi*^{-1} H* D zeta / sqrt(1 + zeta' Lambda* zeta)
    Hs = np.vstack([H, Hp])
    psis = _LowRank(Hs, D, s2)
    zLz = float(zeta @ (s2 * psis.Q @ zeta))
    v = psis.solve(Hs @ (D @ zeta)) / np.sqrt(1.0 + max(zLz, 0.0))
    v1, v2 = v[:t.size], v[t.size:]
    k2 = float(v2 @ P22_1 @ v2)
    v_tilde = (v1 + P11_inv_P12 @ v2) / np.sqrt(1.0 + k2)

    A = float(v_tilde @ r1)
    maha = float(r1 @ psi11.solve(r1))
    tau = _weights_core(maha, A, t.size, theta.mixing, A).tau_m1

    P11 = H @ D @ H.T + s2 * np.eye(t.size)
    P22 = Hp @ D @ Hp.T + s2 * np.eye(t_plus.size)
    return PredictPartition(Hp, P11, P12, P12.T, P22, P22_1, mu_21, v1, v2, v_tilde, float(tau))


def conditional_mean(theta: Theta, curve, t, y, b_tilde, t_plus) -> np.ndarray:
    """E{y+ | y} on the scaled response at arbitrary times ``t_plus``."""
    if np.size(t_plus) == 0:
        return np.zeros(0)
    return partition(theta, curve, t, y, b_tilde, t_plus).mean


def predict_future(fit: FitResult, subject: str, future_times) -> Prediction:
    """Predicted daily values at days ``future_times`` after first death."""
    i = fit.subject_index(subject)
    s = fit.panel.subjects[i]
    tp = np.atleast_1d(np.asarray(future_times, dtype=float))
    if tp.size and np.any(tp <= s.t[-1]):
        raise ValueError(f"{subject}: future times must be after the last observed day {s.t[-1]:g}")
    mean = conditional_mean(fit.theta, fit.curve, s.t, s.y, fit.b_hat[i], tp)
    dates = [s.date_of(d) for d in tp] if s.first_death_date is not None else []
    return Prediction(subject, tp, mean, mean * fit.panel.k_z, dates)


def cumulative_forecast(fit: FitResult, subject: str, horizon_dates) -> np.ndarray:
    """Observed cumulative total plus predicted daily values through each date.

    The base is the raw observed total at the last observed day; predicted
    daily values enter on the original scale, clamped at zero.
    """
    i = fit.subject_index(subject)
    s = fit.panel.subjects[i]
    days = np.array([s.day_of(d) for d in horizon_dates], dtype=int)
    last = int(s.t[-1])
    if days.size and days.min() < last:
        raise ValueError(f"{subject}: horizon dates must not precede the last observation {s.date_of(last)}")
    base = s.observed_total if s.z is not None else float(s.y.sum() * fit.panel.k_z)
    if not days.size:
        return np.zeros(0)
    horizon = int(days.max()) - last
    if horizon == 0:
        return np.full(days.size, base)
    pred = predict_future(fit, subject, np.arange(last + 1, last + horizon + 1))
    running = np.concatenate([[base], base + np.cumsum(pred.reported)])
    return running[days - last]


def horizon_dates(fit: FitResult, horizons) -> list:
    """Calendar dates ``h`` days after the panel snapshot for each horizon."""
    snap = fit.panel.snapshot_date
    if snap is None:
        raise ValueError("panel has no snapshot date")
    out = []
    for h in horizons:
        if int(h) != h or h < 0:
            raise ValueError(f"horizons must be non-negative integers, got {h}")
        out.append(snap + dt.timedelta(days=int(h)))
    return out


def forecast_table(fit: FitResult, horizons) -> list:
    """Rows ``{subject, horizon, date, total}`` for every subject and horizon."""
    dates = horizon_dates(fit, horizons)
    rows = []
    for name in fit.panel.names:
        totals = cumulative_forecast(fit, name, dates)
        for h, d, tot in zip(horizons, dates, totals):
            rows.append({"subject": name, "horizon": int(h), "date": d.isoformat(), "total": float(tot)})
    return rows
