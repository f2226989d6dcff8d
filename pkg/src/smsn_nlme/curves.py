"""Mean curves for the nonlinear mixed model.

The shipped curve is the derivative of the generalized logistic function,
the daily-count shape

    eta(t) = a1 a3 a4 exp(-a3 t) / (a2 + exp(-a3 t))**(a4 + 1)

with ``a1 = exp(beta1)``, ``a2 = exp(beta2 + b1)``, ``a3 = exp(beta3 + b2)``
and ``a4 = exp(beta4)``.  Its antiderivative is the cumulative curve
``a1 / (a2 + exp(-a3 t))**a4``.

Any object exposing ``n_fixed``, ``n_random``, ``eta`` and ``jacobians``
can stand in for it during estimation; :class:`Curve` supplies a
central-difference ``jacobians`` for curves without analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass(frozen=True)
class CurveParams:
    """Natural-scale parameters of one generalized-logistic curve."""

    alpha1: float
    alpha2: float
    alpha3: float
    alpha4: float

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v}")

    @classmethod
    def from_effects(cls, beta, b=(0.0, 0.0)) -> "CurveParams":
        beta = np.asarray(beta, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(*np.exp([beta[0], beta[1] + b[0], beta[2] + b[1], beta[3]]))

    def scaled(self, k: float) -> "CurveParams":
        """Same curve with the response multiplied by ``k``."""
        return CurveParams(self.alpha1 * k, self.alpha2, self.alpha3, self.alpha4)


def _log_base(t, a2, a3):
    # log(a2 + exp(-a3 t)) without overflow for very negative t
    return np.logaddexp(np.log(a2), -a3 * t)


def log_eta_params(t, p: CurveParams):
    t = np.asarray(t, dtype=float)
    return (np.log(p.alpha1) + np.log(p.alpha3) + np.log(p.alpha4) - p.alpha3 * t
            - (p.alpha4 + 1.0) * _log_base(t, p.alpha2, p.alpha3))


def eta(t, beta, b=(0.0, 0.0)):
    """Daily curve value at day(s) ``t`` for log-scale effects ``beta`` and ``b``."""
    return np.exp(log_eta_params(t, CurveParams.from_effects(beta, b)))


def grad_eta(t, beta, b=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Analytic partial derivatives of :func:`eta`.

    Returns
    -------
    d_beta : ndarray, shape (n, 4)
    d_b : ndarray, shape (n, 2)
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    p = CurveParams.from_effects(beta, b)
    a2, a3, a4 = p.alpha2, p.alpha3, p.alpha4
    e = np.exp(log_eta_params(t, p))
    lb = _log_base(t, a2, a3)
    # share = exp(-a3 t) / (a2 + exp(-a3 t)), computed as a logistic
    share = special.expit(-a3 * t - np.log(a2))
    d_log_a2 = -(a4 + 1.0) * (1.0 - share)
    d_log_a3 = 1.0 - a3 * t + (a4 + 1.0) * a3 * t * share
    d_log_a4 = 1.0 - a4 * lb
    d_beta = np.column_stack([e, e * d_log_a2, e * d_log_a3, e * d_log_a4])
    return d_beta, d_beta[:, 1:3].copy()


def peak_time(p: CurveParams) -> float:
    """Day of the maximum of the daily curve, ``log(a4/a2)/a3``."""
    return float(np.log(p.alpha4 / p.alpha2) / p.alpha3)


def peak_value(p: CurveParams) -> float:
    return float(np.exp(log_eta_params(peak_time(p), p)))


def total_asymptote(p: CurveParams) -> float:
    """Limit of the cumulative curve, ``a1 / a2**a4``."""
    return float(np.exp(np.log(p.alpha1) - p.alpha4 * np.log(p.alpha2)))


def cumulative(t, p: CurveParams):
    """Integral of the daily curve from minus infinity to ``t``."""
    t = np.asarray(t, dtype=float)
    return np.exp(np.log(p.alpha1) - p.alpha4 * _log_base(t, p.alpha2, p.alpha3))


# ---------------------------------------------------------------------------
# Pluggable curve objects used by the estimator
# ---------------------------------------------------------------------------


class Curve:
    """Base class for mean functions ``eta(t; beta, b)``.

    Subclasses define ``n_fixed``, ``n_random`` and ``eta``.  Override
    ``jacobians`` when analytic derivatives are available.
    """

    n_fixed: int
    n_random: int
    name = "curve"
    # positions in beta whose column equals the matching column of d eta / d b
    random_index: tuple = ()
    fd_step = 1e-6

    def eta(self, t, beta, b):
        raise NotImplementedError

    def jacobians(self, t, beta, b) -> tuple[np.ndarray, np.ndarray]:
        """(d eta / d beta', d eta / d b') by central differences."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        beta = np.asarray(beta, dtype=float)
        b = np.asarray(b, dtype=float)

        def diff(f, x):
            cols = []
            for k in range(x.size):
                h = self.fd_step * max(1.0, abs(x[k]))
                xp, xm = x.copy(), x.copy()
                xp[k] += h
                xm[k] -= h
                cols.append((f(xp) - f(xm)) / (2 * h))
            return np.column_stack(cols) if cols else np.zeros((t.size, 0))

        return (diff(lambda v: self.eta(t, v, b), beta),
                diff(lambda v: self.eta(t, beta, v), b))

    def to_dict(self) -> dict:
        return {"name": self.name}


class GeneralizedLogisticCurve(Curve):
    """Derivative of the generalized logistic with random (log a2, log a3)."""

    n_fixed = 4
    n_random = 2
    name = "generalized_logistic"
    random_index = (1, 2)

    def eta(self, t, beta, b):
        return eta(np.atleast_1d(t), beta, b)

    def jacobians(self, t, beta, b):
        return grad_eta(t, beta, b)

    def params(self, beta, b) -> CurveParams:
        return CurveParams.from_effects(beta, b)

    def start_values(self, panel) -> list:
        """Candidate log-scale starts matched to the mean observed total."""
        total = float(np.mean([max(np.sum(s.y), 1e-6) for s in panel]))
        starts = []
        for a2 in (0.5, 1.0, 2.0):
            for a3 in (0.02, 0.05, 0.1):
                for a4 in (1.0, 5.0, 20.0):
                    starts.append(np.array([np.log(total) + a4 * np.log(a2), np.log(a2), np.log(a3),
                                            np.log(a4)]))
        return starts


class LinearCurve(Curve):
    """Polynomial mean ``sum_k beta_k t^k + sum_j b_j t^j``.

    Linear in both effect vectors, so the linearized fit is exact; used to
    compare against classical linear mixed-model solvers.
    """

    name = "linear"

    def __init__(self, fixed_degree: int = 1, random_degree: int = 0):
        self.fixed_degree = fixed_degree
        self.random_degree = random_degree
        self.n_fixed = fixed_degree + 1
        self.n_random = random_degree + 1
        self.random_index = tuple(range(min(fixed_degree, random_degree) + 1))

    def design(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return (np.vander(t, self.n_fixed, increasing=True),
                np.vander(t, self.n_random, increasing=True))

    def eta(self, t, beta, b):
        X, Z = self.design(t)
        return X @ np.asarray(beta, dtype=float) + Z @ np.asarray(b, dtype=float)

    def jacobians(self, t, beta, b):
        return self.design(t)

    def start_values(self, panel) -> list:
        t = np.concatenate([s.t for s in panel])
        y = np.concatenate([s.y for s in panel])
        return [np.linalg.lstsq(self.design(t)[0], y, rcond=None)[0]]

    def to_dict(self):
        return {"name": self.name, "fixed_degree": self.fixed_degree,
                "random_degree": self.random_degree}


def curve_from_dict(d: dict) -> Curve:
    if d["name"] == GeneralizedLogisticCurve.name:
        return GeneralizedLogisticCurve()
    if d["name"] == LinearCurve.name:
        return LinearCurve(d["fixed_degree"], d["random_degree"])
    raise ValueError(f"unknown curve {d['name']!r}")
