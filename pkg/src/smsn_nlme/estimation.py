"""Approximate maximum likelihood for SMSN nonlinear mixed-effects models.

The model for subject i is

    y_i = eta(t_i; beta, b_i) + e_i,
    (b_i, e_i) ~ SMSN_{q+n_i}((c Delta, 0), diag(D, sigma2 I), (lambda, 0); H)

with ``c = -sqrt(2/pi) E{U^-1/2}`` so that the random effects have mean
zero.  The likelihood is approximated by a first-order Taylor expansion
of eta around the current (beta~, b~_i), which turns the problem into a
linear SMSN mixed model for the pseudo-response

    y~_i = y_i - eta(beta~, b~_i) + W_i beta~ + H_i b~_i = W_i beta + H_i b_i + e_i.

Each outer iteration relinearizes, runs ECM sweeps on that linear model
(closed-form updates of beta, sigma2, D and lambda through the
hierarchical representation ``b | t, u ~ N(c Delta + Delta t, Gamma/u)``,
``t | u ~ HN(0, 1/u)``), profiles the mixing parameter nu on the marginal
likelihood, and refreshes b~_i with the approximate empirical Bayes
estimator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

from .curves import Curve, GeneralizedLogisticCurve, curve_from_dict
from .data_io import PreparedPanel
from .smsn_dist import (SQRT_2_OVER_PI, MixingLaw, NumericalError, _logpdf_core, _weights_core,
                        k1, skew_vectors, sym_sqrt)

log = logging.getLogger(__name__)

FAMILIES = {
    "n": ("normal", False),
    "sn": ("normal", True),
    "t": ("t", False),
    "st": ("t", True),
    "sl": ("slash", False),
    "ssl": ("slash", True),
    "cn": ("cn", False),
    "scn": ("cn", True),
}

NU_BOUNDS = {"t": (1.01, 200.0), "slash": (0.51, 50.0), "cn": ((0.005, 0.995), (0.005, 0.995))}
NU_START = {"t": (5.0,), "slash": (2.0,), "cn": (0.1, 0.3)}


class ModelError(RuntimeError):
    """The fit could not proceed (numerical breakdown, bad input)."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    """Mixing law plus whether the random effects carry skewness."""

    mixing: str
    skew: bool

    @classmethod
    def from_name(cls, name: str) -> "Family":
        try:
            return cls(*FAMILIES[name.lower()])
        except KeyError:
            raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None

    @property
    def name(self) -> str:
        for k, v in FAMILIES.items():
            if v == (self.mixing, self.skew):
                return k
        raise AssertionError

    def default_mixing(self) -> MixingLaw:
        if self.mixing == "normal":
            return MixingLaw.normal()
        return MixingLaw(self.mixing, *NU_START[self.mixing])


@dataclass
class Theta:
    """Full parameter vector (beta, sigma2, D, lambda, nu)."""

    beta: np.ndarray
    sigma2: float
    D: np.ndarray
    lam: np.ndarray
    mixing: MixingLaw = field(default_factory=MixingLaw)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).copy()
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float)).copy()
        q = self.D.shape[0]
        self.lam = np.broadcast_to(np.asarray(self.lam, dtype=float), (q,)).copy()
        self.sigma2 = float(self.sigma2)
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")
        try:
            np.linalg.cholesky(self.D)
        except np.linalg.LinAlgError:
            raise ValueError("D is not positive definite") from None
        self._skew = None

    @property
    def q(self) -> int:
        return self.D.shape[0]

    @property
    def skew_vectors(self):
        """(delta, Delta, zeta) from D and lambda, computed once per instance."""
        if self._skew is None:
            self._skew = skew_vectors(self.D, self.lam)
        return self._skew

    @property
    def Delta(self) -> np.ndarray:
        return self.skew_vectors[1]

    @property
    def c(self) -> float:
        """Centering constant -sqrt(2/pi) k1 (0 when lambda = 0)."""
        if not np.any(self.lam):
            return 0.0
        return -SQRT_2_OVER_PI * k1(self.mixing)

    @property
    def alpha(self) -> np.ndarray:
        """Lower-triangular Cholesky entries of D, row by row."""
        L = np.linalg.cholesky(self.D)
        return L[np.tril_indices(self.q)]

    @property
    def D_sqrt(self) -> np.ndarray:
        """Symmetric F with F F = D."""
        return sym_sqrt(self.D)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.sigma2], self.alpha, self.lam, self.mixing.params])

    def copy(self) -> "Theta":
        return Theta(self.beta, self.sigma2, self.D, self.lam, self.mixing)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "sigma2": self.sigma2, "D": self.D.tolist(),
                "lambda": self.lam.tolist(), "mixing": {"kind": self.mixing.kind, "nu": self.mixing.nu,
                                                         "gamma": self.mixing.gamma},
                "D_sqrt": self.D_sqrt.tolist(), "alpha_chol": self.alpha.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Theta":
        m = d["mixing"]
        return cls(d["beta"], d["sigma2"], d["D"], d["lambda"], MixingLaw(m["kind"], m["nu"], m["gamma"]))


def n_free_params(n_fixed: int, q: int, family: Family) -> int:
    """beta + sigma2 + Cholesky entries of D (+ lambda) + mixing parameters."""
    n_mix = {"normal": 0, "t": 1, "slash": 1, "cn": 2}[family.mixing]
    return n_fixed + 1 + q * (q + 1) // 2 + (q if family.skew else 0) + n_mix


def info_criteria(loglik: float, p: int, N: int) -> dict:
    """AIC = 2p - 2 loglik, BIC = p ln N - 2 loglik."""
    return {"aic": 2.0 * p - 2.0 * loglik, "bic": p * np.log(N) - 2.0 * loglik}


# ---------------------------------------------------------------------------
# Per-subject linear-algebra kernels
# ---------------------------------------------------------------------------


@dataclass
class Linearization:
    """First-order expansion of one subject's mean around (beta~, b~)."""

    W: np.ndarray
    H: np.ndarray
    eta: np.ndarray
    y: np.ndarray
    beta_tilde: np.ndarray
    b_tilde: np.ndarray

    @property
    def y_tilde(self) -> np.ndarray:
        """Pseudo-response y - eta~ + W beta~ + H b~."""
        return self.y - self.eta + self.W @ self.beta_tilde + self.H @ self.b_tilde


def linearize(curve: Curve, t, y, beta, b) -> Linearization:
    beta = np.asarray(beta, dtype=float)
    b = np.asarray(b, dtype=float)
    W, H = curve.jacobians(t, beta, b)
    return Linearization(W, H, np.asarray(curve.eta(t, beta, b), dtype=float),
                         np.asarray(y, dtype=float), beta.copy(), b.copy())


class _LowRank:
    """Psi = H G H' + s2 I handled through q x q systems only.

    With the thin QR ``H = Qh R`` and ``S = I + R G R' / s2``,

        Psi^{-1} x    = (x - Qh Qh'x + Qh S^{-1} Qh'x) / s2
        Psi^{-1/2} x  = (x - Qh Qh'x + Qh S^{-1/2} Qh'x) / s
        log|Psi|      = n log s2 + log|S|

    and ``Q = (s2 I + G H'H)^{-1} G`` gives ``G - G H' Psi^{-1} H G = s2 Q``.
    Psi itself is never formed: steep curves make H'H huge and Psi nearly
    singular in floating point.
    """

    def __init__(self, H: np.ndarray, G: np.ndarray, s2: float):
        n, q = H.shape
        self.n, self.s2 = n, s2
        self.Qh, R = np.linalg.qr(H)
        S = np.eye(q) + R @ G @ R.T / s2
        w, V = np.linalg.eigh((S + S.T) / 2.0)
        if w[0] <= 0 or not np.all(np.isfinite(w)):
            raise NumericalError("marginal dispersion is not positive definite")
        self._Sinv = (V / w) @ V.T
        self._Sinv_half = (V / np.sqrt(w)) @ V.T
        self.logdet = n * np.log(s2) + float(np.sum(np.log(w)))
        try:
            Q = np.linalg.solve(s2 * np.eye(q) + G @ H.T @ H, G)
        except np.linalg.LinAlgError:
            raise NumericalError("low-rank dispersion update is singular") from None
        self.Q = (Q + Q.T) / 2.0

    def _apply(self, x, core):
        proj = self.Qh.T @ x
        return x - self.Qh @ proj + self.Qh @ (core @ proj)

    def solve(self, x: np.ndarray) -> np.ndarray:
        return self._apply(x, self._Sinv) / self.s2

    def whiten(self, x: np.ndarray) -> np.ndarray:
        return self._apply(x, self._Sinv_half) / np.sqrt(self.s2)


@dataclass
class _Marginal:
    """Pieces of the (approximate) marginal law SMSN(mu, Psi, lambda_bar)."""

    psi: _LowRank
    e0: np.ndarray  # residual before the c * H Delta shift
    HDelta: np.ndarray
    g: np.ndarray  # Psi^{-1} H D^{1/2} lambda
    denom: float  # sqrt(1 + zeta' Lambda zeta)
    Lz: np.ndarray  # Lambda zeta, Lambda = D - D H' Psi^{-1} H D

    @property
    def n(self) -> int:
        return self.psi.n

    @property
    def logdet(self) -> float:
        return self.psi.logdet

    def maha_A(self, c: float) -> tuple[float, float]:
        r = self.e0 - c * self.HDelta
        return float(r @ self.psi.solve(r)), float(self.g @ r / self.denom)


def _marginal(theta: Theta, H: np.ndarray, e0: np.ndarray, index=None) -> _Marginal:
    try:
        psi = _LowRank(H, theta.D, theta.sigma2)
    except NumericalError:
        raise NumericalError(f"marginal dispersion Psi is not positive definite for subject {index}") from None
    _, Delta, zeta = theta.skew_vectors
    v = theta.D @ zeta
    g = psi.solve(H @ v)
    # Lambda = (D^{-1} + H'H/s2)^{-1} = s2 Q
    Lz = theta.sigma2 * psi.Q @ zeta
    zLz = float(zeta @ Lz)
    return _Marginal(psi, e0, H @ Delta, g, float(np.sqrt(1.0 + max(zLz, 0.0))), Lz)


def _subject_logpdf(m: _Marginal, c: float, mixing: MixingLaw) -> float:
    maha, A = m.maha_A(c)
    return _logpdf_core(maha, A, m.logdet, m.n, mixing)


def _location_offset(theta: Theta, H, b_tilde, form: str):
    """eta-relative location shift of the approximate marginal law."""
    if form == "printed":
        return -H @ (b_tilde - theta.c * theta.Delta)
    if form == "alternative":
        return -H @ (b_tilde + theta.c * theta.Delta)
    raise ValueError(f"unknown location form {form!r}")


def approx_loglik(theta: Theta, panel: PreparedPanel, b_tilde, curve: Curve | None = None,
                  location_form: str = "printed", per_subject: bool = False):
    """Approximate log-likelihood from the linearized marginal law.

    Each subject contributes ``log SMSN_{n_i}(y_i; eta_i(beta, b~_i) -
    H_i (b~_i - c Delta), Psi_i, lambda_bar_i; H)`` with H_i and Psi_i
    evaluated at (beta, b~_i).  ``location_form='alternative'`` uses
    ``-H_i (b~_i + c Delta)`` instead.
    """
    curve = curve or GeneralizedLogisticCurve()
    b_tilde = np.atleast_2d(np.asarray(b_tilde, dtype=float))
    out = []
    for i, (s, bt) in enumerate(zip(panel, b_tilde)):
        lin = linearize(curve, s.t, s.y, theta.beta, bt)
        loc = lin.eta + _location_offset(theta, lin.H, bt, location_form)
        # the c * H Delta part is already inside loc, so evaluate at c = 0
        m = _marginal(theta, lin.H, s.y - loc, i)
        out.append(_subject_logpdf(m, 0.0, theta.mixing))
    out = np.array(out)
    return out if per_subject else float(np.sum(out))


def linearized_loglik(theta: Theta, lins: list) -> float:
    """Exact log-likelihood of the linear SMSN mixed model defined by ``lins``."""
    return _LinStats(theta, lins).loglik(theta.lam, theta.mixing)


class _LinCache:
    """Thin QR of each H_i and the projections of e_i = y~_i - W_i beta that
    do not depend on (sigma2, D, lambda, nu)."""

    def __init__(self, lins: list, beta):
        R, proj, ee, n, HtH = [], [], [], [], []
        for lin in lins:
            e = lin.y_tilde - lin.W @ beta
            Qh, Ri = np.linalg.qr(lin.H)
            R.append(Ri)
            proj.append(Qh.T @ e)
            ee.append(float(e @ e))
            n.append(lin.H.shape[0])
            HtH.append(lin.H.T @ lin.H)
        self.R, self.proj, self.HtH = np.array(R), np.array(proj), np.array(HtH)
        self.ee, self.n = np.array(ee), np.array(n, dtype=float)


class _LinStats:
    """Per-subject quadratic forms of the linearized model at fixed (beta, sigma2, D).

    Holds e'P e, H'P e, H'P H (P = Psi^{-1}, e = y~ - W beta), Q and log|Psi|,
    from which the loglik at any lambda, mixing law and common scale factor
    s on (sigma2, D) follows with q-dimensional algebra only.
    """

    def __init__(self, theta: Theta, lins: list, cache: "_LinCache | None" = None):
        self.theta = theta
        c = cache if cache is not None else _LinCache(lins, theta.beta)
        q, s2, G = theta.q, theta.sigma2, theta.D
        # S = I + R G R' / s2 for every subject at once
        S = np.eye(q) + np.einsum("mij,jk,mlk->mil", c.R, G, c.R) / s2
        w, V = np.linalg.eigh((S + np.swapaxes(S, 1, 2)) / 2.0)
        bad = np.flatnonzero(~np.all(np.isfinite(w), axis=1) | (w[:, 0] <= 0))
        if bad.size:
            raise NumericalError(f"marginal dispersion Psi is not positive definite for subject {bad[0]}")
        Sinv = np.einsum("mij,mj,mkj->mik", V, 1.0 / w, V)
        Sp = np.einsum("mij,mj->mi", Sinv, c.proj)
        # Psi^{-1} e = (e - Qh p + Qh S^{-1} p) / s2 with p = Qh'e, and H = Qh R
        self.ePe = (c.ee - np.einsum("mi,mi->m", c.proj, c.proj) + np.einsum("mi,mi->m", c.proj, Sp)) / s2
        self.HPe = np.einsum("mji,mj->mi", c.R, Sp) / s2
        self.HPH = np.einsum("mji,mjk,mkl->mil", c.R, Sinv, c.R) / s2
        try:
            Q = np.linalg.solve(s2 * np.eye(q) + np.einsum("ij,mjk->mik", G, c.HtH), np.broadcast_to(G, c.HtH.shape))
        except np.linalg.LinAlgError:
            raise NumericalError("low-rank dispersion update is singular") from None
        self.Q = (Q + np.swapaxes(Q, 1, 2)) / 2.0
        self.n = c.n
        self.logdet = c.n * np.log(s2) + np.sum(np.log(w), axis=1)

    def maha_A(self, lam, mixing: MixingLaw, scale: float = 1.0):
        lam = np.asarray(lam, dtype=float)
        D = self.theta.D * scale
        s2 = self.theta.sigma2 * scale
        if np.any(lam):
            _, Delta, zeta = skew_vectors(D, lam)
            c = -SQRT_2_OVER_PI * k1(mixing)
        else:
            Delta = zeta = np.zeros_like(lam)
            c = 0.0
        HPe, HPH = self.HPe / scale, self.HPH / scale
        HPH_D = HPH @ Delta
        maha = self.ePe / scale - 2.0 * c * (HPe @ Delta) + c * c * (HPH_D @ Delta)
        v = D @ zeta
        zQz = np.einsum("j,ijk,k->i", zeta, self.Q, zeta)
        A = ((HPe - c * HPH_D) @ v) / np.sqrt(1.0 + s2 * np.maximum(zQz, 0.0))
        return maha, A, self.logdet + self.n * np.log(scale)

    def loglik(self, lam, mixing: MixingLaw, scale: float = 1.0, per_subject: bool = False):
        maha, A, logdet = self.maha_A(lam, mixing, scale)
        if mixing.kind in ("normal", "t"):
            out = np.asarray(_logpdf_core(maha, A, logdet, self.n, mixing), dtype=float)
        else:
            out = np.array([_logpdf_core(m, a, ld, int(k), mixing) for m, a, ld, k in zip(maha, A, logdet, self.n)])
        return out if per_subject else float(np.sum(out))


def _eb_one(theta: Theta, H, e0, index=None):
    """Conditional mean of b for one subject plus the E{U|y} weight.

    ``e0`` is the pseudo-residual before the c H Delta shift.
    """
    m = _marginal(theta, H, e0, index)
    c = theta.c
    maha, A = m.maha_A(c)
    w = _weights_core(maha, A, m.n, theta.mixing, A)
    _, Delta, _ = theta.skew_vectors
    r = e0 - c * m.HDelta
    mu_b = c * Delta + theta.D @ H.T @ m.psi.solve(r)
    if not np.any(theta.lam):
        return mu_b, w.kappa
    return mu_b + (w.tau_m1 / m.denom) * m.Lz, w.kappa


def eb_random_effects(theta: Theta, panel: PreparedPanel, b_prev, curve: Curve | None = None) -> np.ndarray:
    """Approximate empirical Bayes estimates of each subject's random effects.

    All linearization quantities are evaluated at ``(theta.beta, b_prev[i])``.
    """
    curve = curve or GeneralizedLogisticCurve()
    b_prev = np.atleast_2d(np.asarray(b_prev, dtype=float))
    out = []
    for i, (s, bp) in enumerate(zip(panel, b_prev)):
        lin = linearize(curve, s.t, s.y, theta.beta, bp)
        e0 = s.y - lin.eta + lin.H @ bp
        out.append(_eb_one(theta, lin.H, e0, i)[0])
    return np.array(out)


def mixing_weights(theta: Theta, panel: PreparedPanel, b_tilde, curve: Curve | None = None) -> np.ndarray:
    """u_hat_i = E{U_i | y_i} under the approximate marginal law."""
    curve = curve or GeneralizedLogisticCurve()
    out = []
    for i, (s, bt) in enumerate(zip(panel, np.atleast_2d(b_tilde))):
        lin = linearize(curve, s.t, s.y, theta.beta, bt)
        m = _marginal(theta, lin.H, s.y - lin.eta + lin.H @ bt, i)
        maha, A = m.maha_A(theta.c)
        out.append(_weights_core(maha, A, m.n, theta.mixing, A).kappa)
    return np.array(out)


# ---------------------------------------------------------------------------
# E and M steps on the linearized model
# ---------------------------------------------------------------------------


@dataclass
class _Moments:
    u: float
    ut: float
    ut2: float
    ub: np.ndarray
    ubb: np.ndarray
    utb: np.ndarray


def _e_step(theta: Theta, lin: Linearization, index=None) -> _Moments:
    q = theta.q
    H, W = lin.H, lin.W
    s2 = theta.sigma2
    c = theta.c
    _, Delta, _ = theta.skew_vectors
    Gamma = theta.D - np.outer(Delta, Delta)
    e = lin.y_tilde - W @ theta.beta  # y~ - W beta
    m = _marginal(theta, H, e, index)
    maha, A = m.maha_A(c)
    w = _weights_core(maha, A, m.n, theta.mixing, A)
    HtH = H.T @ H
    K = np.linalg.solve(np.eye(q) + Gamma @ HtH / s2, np.eye(q))
    rvec = K @ (c * Delta + Gamma @ H.T @ e / s2)
    svec = K @ Delta
    omega = _LowRank(H, Gamma, s2)
    B = s2 * omega.Q  # = K Gamma
    if np.any(Delta):
        HD = H @ Delta
        OiHD = omega.solve(HD)
        M2 = 1.0 / (1.0 + HD @ OiHD)
        mu_t = M2 * (OiHD @ (e - c * HD))
        M = np.sqrt(M2)
        ut = w.kappa * mu_t + M * w.tau_1
        ut2 = w.kappa * mu_t ** 2 + M2 + M * mu_t * w.tau_1
    else:
        ut = ut2 = 0.0
    ub = w.kappa * rvec + ut * svec
    ubb = B + w.kappa * np.outer(rvec, rvec) + ut * (np.outer(rvec, svec) + np.outer(svec, rvec)) \
        + ut2 * np.outer(svec, svec)
    utb = ut * rvec + ut2 * svec
    return _Moments(w.kappa, ut, ut2, ub, ubb, utb)


def _lambda_from(D, Delta):
    """Invert Delta = D^{1/2} delta, delta = lambda / sqrt(1 + lambda'lambda)."""
    delta = sym_sqrt(D, inverse=True) @ Delta
    dd = float(delta @ delta)
    if dd >= 1.0:
        delta *= (1.0 - 1e-10) / np.sqrt(dd)
        dd = float(delta @ delta)
    return delta / np.sqrt(1.0 - dd)


def _update_beta(theta: Theta, lins: list, moms: list, index=None) -> np.ndarray:
    """Fixed effects with b integrated out and only (U, T) missing.

    Conditionally on (u, t) the pseudo-response is normal with mean
    ``W beta + H Delta (c + t)`` and dispersion ``Omega / u``, Omega =
    H Gamma H' + s2 I, so the update is a weighted GLS solved as a
    whitened least-squares problem.
    """
    r = theta.beta.size
    c = theta.c
    _, Delta, _ = theta.skew_vectors
    Gamma = theta.D - np.outer(Delta, Delta)
    rows, target = [], []
    for lin, mo in zip(lins, moms):
        omega = _LowRank(lin.H, Gamma, theta.sigma2)
        HD = lin.H @ Delta
        su = np.sqrt(mo.u)
        rows.append(su * omega.whiten(lin.W))
        target.append(omega.whiten(su * (lin.y_tilde - c * HD) - HD * (mo.ut / su)))
    rows, target = np.vstack(rows), np.concatenate(target)
    if index is None:
        index = np.arange(r)
    index = np.asarray(index, dtype=int)
    rest = np.setdiff1d(np.arange(r), index)
    target = target - rows[:, rest] @ theta.beta[rest]
    sub, _, rank, _ = np.linalg.lstsq(rows[:, index], target, rcond=None)
    if rank < index.size:
        raise NumericalError("fixed-effects design is rank deficient")
    beta = theta.beta.copy()
    beta[index] = sub
    return beta


def _update_beta_full(theta: Theta, lins: list, moms: list) -> np.ndarray:
    """Fixed effects from the full (U, T, b) augmentation.

    Weighted least squares of ``u y~ - H E{u b}`` on W; solved on stacked
    rows to avoid squaring the condition number of the nearly collinear
    fixed-effects design.
    """
    r = theta.beta.size
    rows = np.vstack([np.sqrt(mo.u) * lin.W for lin, mo in zip(lins, moms)])
    target = np.concatenate([np.sqrt(mo.u) * lin.y_tilde - lin.H @ mo.ub / np.sqrt(mo.u)
                             for lin, mo in zip(lins, moms)])
    beta, _, rank, _ = np.linalg.lstsq(rows, target, rcond=None)
    if rank < r:
        raise NumericalError("fixed-effects design is rank deficient")
    return beta


def _m_step(theta: Theta, lins: list, moms: list, update_skew: bool, ridge: float,
            skew_bound: float = np.inf) -> Theta:
    """sigma2, D and lambda from the full (U, T, b) augmentation, beta held."""
    q = theta.q
    beta = theta.beta
    ss = 0.0
    N = 0
    for lin, mo in zip(lins, moms):
        e = lin.y_tilde - lin.W @ beta
        # E{u |e - H b|^2} = u |e - H ub/u|^2 + tr(H'H (ubb - ub ub'/u))
        f = e - lin.H @ mo.ub / mo.u
        ss += mo.u * f @ f + np.trace(lin.H.T @ lin.H @ (mo.ubb - np.outer(mo.ub, mo.ub) / mo.u))
        N += e.size
    sigma2 = ss / N
    if not sigma2 > 0:
        raise NumericalError(f"sigma2 update is not positive ({sigma2})")

    c = theta.c
    n = len(moms)
    # moments of t* = t + c
    ut2s = [mo.ut2 + 2 * c * mo.ut + c * c * mo.u for mo in moms]
    utbs = [mo.utb + c * mo.ub for mo in moms]
    _, Delta, _ = theta.skew_vectors
    if update_skew:
        Delta = sum(utbs) / sum(ut2s)
    Gamma = sum(mo.ubb - np.outer(tb, Delta) - np.outer(Delta, tb) + t2 * np.outer(Delta, Delta)
                for mo, tb, t2 in zip(moms, utbs, ut2s)) / n
    Gamma = (Gamma + Gamma.T) / 2.0
    D = Gamma + np.outer(Delta, Delta)
    w = np.linalg.eigvalsh(D)
    if w[0] <= ridge * max(w[-1], 1e-300):
        log.warning("random-effects covariance update is near singular (eigenvalues %s); ridge retry", w)
        D = D + ridge * max(w[-1], 1.0) * np.eye(q)
        if np.linalg.eigvalsh(D)[0] <= 0:
            raise NumericalError("random-effects covariance update is singular")
    lam = np.clip(_lambda_from(D, Delta), -skew_bound, skew_bound) if update_skew else theta.lam
    return Theta(beta, sigma2, D, lam, theta.mixing)


# ---------------------------------------------------------------------------
# Mixing-parameter profile
# ---------------------------------------------------------------------------


def _rescale_dispersion(theta: Theta, lins: list) -> Theta:
    """Maximize the linearized loglik over a common factor on (sigma2, D).

    Heavy-tailed mixing laws make plain EM crawl along this direction; the
    move is kept only if it improves the likelihood, so sweeps stay monotone.
    """
    stats = _LinStats(theta, lins)

    def objective(log_s):
        try:
            return stats.loglik(theta.lam, theta.mixing, float(np.exp(log_s)))
        except (NumericalError, ValueError):
            return -np.inf

    base = objective(0.0)
    res = optimize.minimize_scalar(lambda x: -objective(x), bounds=(-3.0, 3.0), method="bounded",
                                   options={"xatol": 1e-8})
    if -res.fun > base:
        s = float(np.exp(res.x))
        return replace(theta, sigma2=theta.sigma2 * s, D=theta.D * s)
    return theta


def _profile_skewness(theta: Theta, lins: list, bound: float) -> Theta:
    """Maximize the linearized loglik over lambda with the rest held fixed.

    The moment update for the skewness moves slowly when some random-effect
    variance is small; this conditional step is kept only if it improves.
    """
    stats = _LinStats(theta, lins)

    def objective(lam):
        try:
            return stats.loglik(lam, theta.mixing)
        except (NumericalError, ValueError):
            return -np.inf

    base = objective(theta.lam)
    x0 = np.clip(theta.lam, -bound, bound)
    res = optimize.minimize(lambda x: -objective(x), x0, method="L-BFGS-B",
                            bounds=[(-bound, bound)] * theta.lam.size)
    if np.isfinite(res.fun) and -res.fun > base:
        return replace(theta, lam=np.asarray(res.x, dtype=float))
    return theta


def _profile_nu(theta: Theta, lins: list, cfg: "FitConfig") -> Theta:
    kind = theta.mixing.kind
    if kind == "normal" or not cfg.estimate_nu:
        return theta
    stats = _LinStats(theta, lins)

    def objective(params):
        try:
            return stats.loglik(theta.lam, theta.mixing.with_params(*params))
        except (ValueError, NumericalError):
            return -np.inf

    current = objective(theta.mixing.params)
    bounds = cfg.nu_bounds.get(kind, NU_BOUNDS[kind])
    if kind == "cn":
        (a0, a1), (g0, g1) = bounds
        grid = [(a, g) for a in np.linspace(a0, a1, 9) for g in np.linspace(g0, g1, 9)]
        vals = [objective(p) for p in grid]
        start = grid[int(np.argmax(vals))]
        res = optimize.minimize(lambda p: -objective(p), start, method="Nelder-Mead",
                                bounds=[(a0, a1), (g0, g1)], options={"xatol": 1e-6, "fatol": 1e-9})
        best, val = tuple(res.x), -res.fun
    else:
        lo, hi = np.log(bounds[0]), np.log(bounds[1])
        grid = np.linspace(lo, hi, cfg.nu_grid_size)
        vals = np.array([objective((np.exp(s),)) for s in grid])
        k = int(np.argmax(vals))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
        res = optimize.minimize_scalar(lambda s: -objective((np.exp(s),)), bounds=(a, b),
                                       method="bounded", options={"xatol": 1e-7})
        best, val = (float(np.exp(res.x)),), -res.fun
        if vals[k] > val:
            best, val = (float(np.exp(grid[k])),), vals[k]
    if val > current:
        return replace(theta, mixing=theta.mixing.with_params(*best))
    return theta


def _polish(theta: Theta, lins: list, cfg: "FitConfig", update_skew: bool) -> Theta:
    """Quasi-Newton maximization of the linearized loglik over sigma2, D, lambda and nu.

    EM moves slowly where variance components are weakly identified (random
    slopes, small D entries); this extra conditional step climbs the same
    objective directly and is kept only if it improves, so sweeps stay monotone.
    """
    x0 = _free_vector(theta, cfg)
    p, q = theta.beta.size, theta.q
    m = q * (q + 1) // 2
    lam_slice = slice(p + 1 + m, p + 1 + m + q)
    free = np.ones(x0.size, dtype=bool)
    # beta has its own exact conditional update; moving it here lets the step
    # wander along directions the linear approximation does not support
    free[:p] = False
    if not update_skew:
        free[lam_slice] = False
    if not cfg.estimate_nu:
        free[p + 1 + m + q:] = False
    cache = _LinCache(lins, theta.beta)
    base = _LinStats(theta, lins, cache).loglik(theta.lam, theta.mixing)
    # the unconstrained map zeroes lambda when the template has none
    like = replace(theta, lam=np.where(theta.lam == 0, 1e-300, theta.lam)) if update_skew else theta

    def objective(z):
        x = x0.copy()
        x[free] = z
        try:
            with np.errstate(all="ignore"):
                th = _from_free(x, like, cfg)
                val = _LinStats(th, lins, cache).loglik(th.lam, th.mixing)
        except (NumericalError, ValueError, np.linalg.LinAlgError, linalg.LinAlgError, FloatingPointError):
            return np.inf
        return -val if np.isfinite(val) else np.inf

    bounds = [(None, None)] * x0.size
    bounds[lam_slice] = [(-cfg.skew_bound, cfg.skew_bound)] * q
    if theta.mixing.kind in ("t", "slash"):
        lo, hi = cfg.nu_bounds.get(theta.mixing.kind, NU_BOUNDS[theta.mixing.kind])
        bounds[-1] = (np.log(lo), np.log(hi))
    res = optimize.minimize(objective, x0[free], method="L-BFGS-B", bounds=[b for b, f in zip(bounds, free) if f],
                            options={"maxiter": cfg.polish_iter, "ftol": 1e-15, "gtol": 1e-10})
    if np.isfinite(res.fun) and -res.fun > base:
        x = x0.copy()
        x[free] = res.x
        return _from_free(x, like, cfg)
    return theta


# ---------------------------------------------------------------------------
# Fitting driver
# ---------------------------------------------------------------------------


@dataclass
class FitConfig:
    """Tolerances, iteration caps and initial values for :func:`fit`."""

    tol_loglik: float = 1e-6
    tol_param: float = 1e-4
    max_iter: int = 200
    inner_em: int = 1
    estimate_nu: bool = True
    nu_bounds: dict = field(default_factory=dict)
    nu_grid_size: int = 25
    nu_init: tuple | None = None
    fix_skewness: bool = False
    skew_warmup: int = 30
    skew_grid: tuple = (-5.0, -2.0, -0.5, 0.5, 2.0, 5.0)
    D_init: float = 0.1
    ridge: float = 1e-10
    init_theta: Theta | None = None
    init_b: np.ndarray | None = None
    monotone_tol: float = 1e-8
    scale_step: bool = True
    beta_step: str = "hybrid"
    skew_step: bool = True
    skew_bound: float = 50.0
    init_ridge: float = 1e-4
    backtrack_tol: float = 1e-8
    max_halvings: int = 12
    eb_tol: float = 1e-8
    eb_max_iter: int = 50
    accelerate: bool = True
    polish: bool = True
    polish_iter: int = 50

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("tol_loglik", "tol_param", "max_iter", "inner_em", "estimate_nu",
                                          "nu_grid_size", "fix_skewness", "skew_warmup", "D_init", "ridge",
                                          "monotone_tol", "scale_step", "beta_step", "skew_step", "skew_bound", "init_ridge", "backtrack_tol", "max_halvings", "eb_tol", "eb_max_iter",
                                          "accelerate", "polish", "polish_iter")}
        d["nu_init"] = list(self.nu_init) if self.nu_init else None
        d["skew_grid"] = list(self.skew_grid)
        d["nu_bounds"] = {k: list(v) for k, v in self.nu_bounds.items()}
        return d


@dataclass
class FitResult:
    theta: Theta
    family: Family
    b_hat: np.ndarray
    u_hat: np.ndarray
    loglik: float
    aic: float
    bic: float
    n_params: int
    n_obs: int
    trace: list
    converged: bool
    panel: PreparedPanel
    curve: Curve = field(default_factory=GeneralizedLogisticCurve)
    config: FitConfig = field(default_factory=FitConfig)
    events: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def subject_index(self, name: str) -> int:
        try:
            return self.panel.names.index(name)
        except ValueError:
            raise KeyError(f"unknown subject {name!r}; available: {', '.join(self.panel.names)}") from None

    def fitted(self, name: str, t=None) -> np.ndarray:
        """Subject-specific curve eta(t; beta_hat, b_hat_i) on the scaled response."""
        i = self.subject_index(name)
        s = self.panel.subjects[i]
        t = s.t if t is None else np.asarray(t, dtype=float)
        return np.asarray(self.curve.eta(t, self.theta.beta, self.b_hat[i]))

    def curve_params(self, name: str, original_scale: bool = True):
        """Generalized-logistic parameters of one subject's fitted curve."""
        i = self.subject_index(name)
        p = self.curve.params(self.theta.beta, self.b_hat[i])
        return p.scaled(self.panel.k_z) if original_scale else p

    def summary_table(self) -> list:
        rows = []
        for name in self.panel.names:
            rows.append({"subject": name, "u_hat": float(self.u_hat[self.subject_index(name)]),
                         "b_hat": self.b_hat[self.subject_index(name)].tolist()})
        return rows


def _initial_values(curve: Curve, panel: PreparedPanel, cfg: "FitConfig"):
    """Least-squares starting values (beta, b, sigma2, D).

    A pooled fit (all b = 0) from the curve's candidate starts is followed
    by a joint fit of beta and every b_i, with a small ridge on the b_i so
    that shifts shared between beta and the mean of the b_i stay fixed.
    """
    q = curve.n_random
    r = curve.n_fixed
    n = len(panel)
    t = np.concatenate([s.t for s in panel])
    y = np.concatenate([s.y for s in panel])
    zero = np.zeros(q)

    def pooled_resid(beta):
        return curve.eta(t, beta, zero) - y

    best = None
    starts = curve.start_values(panel) if hasattr(curve, "start_values") else [np.zeros(r)]
    with np.errstate(over="ignore", invalid="ignore"):
        for start in starts:
            try:
                res = optimize.least_squares(pooled_resid, start, method="lm", max_nfev=200 * (r + 1))
            except ValueError:
                continue
            if np.all(np.isfinite(res.x)) and np.isfinite(res.cost) and (best is None or res.cost < best.cost):
                best = res
    if best is None:
        raise ModelError("could not find starting values for the population curve")
    beta0 = best.x

    rho = np.sqrt(cfg.init_ridge * max(float(np.var(y)), 1e-12))
    sizes = [s.n for s in panel]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def unpack(x):
        return x[:r], x[r:].reshape(n, q)

    def resid(x):
        beta, b = unpack(x)
        parts = [curve.eta(s.t, beta, bi) - s.y for s, bi in zip(panel, b)]
        return np.concatenate(parts + [rho * b.ravel()])

    def jac(x):
        beta, b = unpack(x)
        J = np.zeros((offsets[-1] + n * q, r + n * q))
        for i, (s, bi) in enumerate(zip(panel, b)):
            W, H = curve.jacobians(s.t, beta, bi)
            J[offsets[i]:offsets[i + 1], :r] = W
            J[offsets[i]:offsets[i + 1], r + i * q:r + (i + 1) * q] = H
        J[offsets[-1]:, r:] = rho * np.eye(n * q)
        return J

    x0 = np.concatenate([beta0, np.zeros(n * q)])
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.least_squares(resid, x0, jac=jac, method="trf", x_scale="jac",
                                         max_nfev=100 * (r + 1))
        ok = np.all(np.isfinite(res.x)) and res.cost <= 0.5 * float(np.sum(pooled_resid(beta0) ** 2))
    except (ValueError, ArithmeticError):
        ok = False
    if ok:
        beta, b = unpack(res.x)
    else:
        beta, b = beta0, np.zeros((n, q))
    e = np.concatenate([curve.eta(s.t, beta, bi) - s.y for s, bi in zip(panel, b)])
    sigma2 = max(float(np.mean(e ** 2)), 1e-8)
    if n > 1 and ok:
        D = np.atleast_2d(np.cov(b, rowvar=False))
        floor = cfg.D_init * max(float(np.trace(D)) / q, 1e-3)
        D = D + floor * np.eye(q)
    else:
        D = cfg.D_init * np.eye(q)
    return beta, b, sigma2, D


def _initial_b(curve: Curve, panel: PreparedPanel, theta: Theta) -> np.ndarray:
    """Per-subject penalized least-squares modes of b at fixed theta."""
    q = curve.n_random
    Dih = sym_sqrt(theta.D, inverse=True)
    s = np.sqrt(theta.sigma2)
    out = []
    for subj in panel:
        def resid(b, subj=subj):
            return np.concatenate([(curve.eta(subj.t, theta.beta, b) - subj.y) / s, Dih @ b])

        def jac(b, subj=subj):
            return np.vstack([curve.jacobians(subj.t, theta.beta, b)[1] / s, Dih])

        try:
            with np.errstate(over="ignore", invalid="ignore"):
                res = optimize.least_squares(resid, np.zeros(q), jac=jac, method="trf")
            out.append(res.x if np.all(np.isfinite(res.x)) else np.zeros(q))
        except (ValueError, ArithmeticError):
            out.append(np.zeros(q))
    return np.array(out)


def _param_change(old: Theta, new: Theta) -> float:
    a, b = old.vector(), new.vector()
    return float(np.linalg.norm(b - a) / max(np.linalg.norm(a), 1e-8))


def _free_vector(theta: Theta, cfg: "FitConfig") -> np.ndarray:
    """Unconstrained coordinates: log sigma2, log-Cholesky D, transformed nu."""
    L = np.linalg.cholesky(theta.D)
    L[np.diag_indices(theta.q)] = np.log(np.diag(L))
    return np.concatenate([theta.beta, [np.log(theta.sigma2)], L[np.tril_indices(theta.q)], theta.lam,
                           _nu_to_free(theta.mixing, cfg)])


def _from_free(x: np.ndarray, like: Theta, cfg: "FitConfig") -> Theta:
    p, q = like.beta.size, like.q
    m = q * (q + 1) // 2
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = x[p + 1:p + 1 + m]
    L[np.diag_indices(q)] = np.exp(np.diag(L))
    lam = np.clip(x[p + 1 + m:p + 1 + m + q], -cfg.skew_bound, cfg.skew_bound)
    mixing = _nu_from_free(x[p + 1 + m + q:], like.mixing, cfg)
    return Theta(x[:p], float(np.exp(x[p])), L @ L.T, lam if np.any(like.lam) else like.lam, mixing)


def _nu_to_free(mixing: MixingLaw, cfg: "FitConfig") -> np.ndarray:
    if mixing.kind == "normal":
        return np.zeros(0)
    if mixing.kind == "cn":
        out = []
        for v, (lo, hi) in zip(mixing.params, cfg.nu_bounds.get("cn", NU_BOUNDS["cn"])):
            f = np.clip((v - lo) / (hi - lo), 1e-12, 1 - 1e-12)
            out.append(np.log(f / (1 - f)))
        return np.array(out)
    return np.log(np.array(mixing.params, dtype=float))


def _nu_from_free(x: np.ndarray, mixing: MixingLaw, cfg: "FitConfig") -> MixingLaw:
    kind = mixing.kind
    if kind == "normal":
        return mixing
    bounds = cfg.nu_bounds.get(kind, NU_BOUNDS[kind])
    if kind == "cn":
        vals = [lo + (hi - lo) / (1 + np.exp(-v)) for v, (lo, hi) in zip(x, bounds)]
        return mixing.with_params(*vals)
    return mixing.with_params(float(np.clip(np.exp(x[0]), bounds[0], bounds[1])))


def _extrapolate(th0: Theta, th1: Theta, th2: Theta, b2, ll2, panel, curve, cfg):
    """Squared extrapolation of two successive updates, kept only if it climbs.

    With r = x1 - x0 and v = x2 - 2 x1 + x0 in unconstrained coordinates,
    the trial point is x0 - 2 a r + a^2 v with a = -|r|/|v|; the step
    length is pulled back toward a = -1 (plain x2) while the approximate
    loglik at the trial point falls short of the one at x2.
    """
    x0, x1, x2 = (_free_vector(t, cfg) for t in (th0, th1, th2))
    r, v = x1 - x0, x2 - 2 * x1 + x0
    nv = np.linalg.norm(v)
    if not nv > 0:
        return None
    a = -np.linalg.norm(r) / nv
    shared = list(getattr(curve, "random_index", ()))
    while a < -1.0 - 1e-8:
        try:
            # trial points far along the path may overflow; they are simply rejected
            with np.errstate(all="ignore"):
                theta = _from_free(x0 - 2 * a * r + a * a * v, th2, cfg)
                base = b2.copy()
                if shared:
                    base[:, :len(shared)] -= theta.beta[shared] - th2.beta[shared]
                b = _eb_fixed_point(theta, panel, curve, base, cfg)
                ll = approx_loglik(theta, panel, b, curve)
        except (NumericalError, ValueError, np.linalg.LinAlgError, linalg.LinAlgError, FloatingPointError):
            ll = -np.inf
        if np.isfinite(ll) and ll > ll2:
            return theta, b, ll, float(a)
        a = (a - 1.0) / 2.0
    return None


def fit(panel: PreparedPanel, family: Family | str = "n", config: FitConfig | None = None,
        curve: Curve | None = None) -> FitResult:
    """Fit an SMSN nonlinear mixed-effects model by linearization + ECM.

    Subjects are processed in name order, so the result does not depend on
    the order of ``panel.subjects``.  A fit that hits ``max_iter`` returns
    with ``converged=False``.
    """
    cfg = config or FitConfig()
    curve = curve or GeneralizedLogisticCurve()
    family = Family.from_name(family) if isinstance(family, str) else family
    q = curve.n_random
    if not len(panel):
        raise ModelError("panel is empty")
    order = sorted(range(len(panel)), key=lambda i: panel.subjects[i].name)
    spanel = PreparedPanel([panel.subjects[i] for i in order], panel.k_z, panel.snapshot_date, panel.meta)
    for s in spanel:
        if s.n <= q:
            raise ModelError(f"subject {s.name!r} has {s.n} observations; need more than {q}")

    if cfg.init_theta is not None:
        theta = cfg.init_theta.copy()
        if theta.mixing.kind != family.mixing:
            theta = replace(theta, mixing=family.default_mixing())
        if not family.skew:
            theta = replace(theta, lam=np.zeros(q))
        b_tilde = None if cfg.init_b is not None else _initial_b(curve, spanel, theta)
    else:
        beta0, b_tilde, sigma2, D0 = _initial_values(curve, spanel, cfg)
        mixing = family.default_mixing()
        if cfg.nu_init is not None and mixing.kind != "normal":
            mixing = mixing.with_params(*cfg.nu_init)
        theta = Theta(beta0, sigma2, D0, np.zeros(q), mixing)
    if cfg.init_b is not None:
        b_tilde = np.asarray(cfg.init_b, dtype=float)[order].copy()

    try:
        b_tilde = _eb_fixed_point(theta, spanel, curve, b_tilde, cfg)
    except NumericalError:
        if cfg.init_theta is None:
            raise
        # a poor penalized least-squares start; the prior mean is always finite
        b_tilde = _eb_fixed_point(theta, spanel, curve, np.zeros((len(spanel), q)), cfg)
    skew_pending = family.skew and not cfg.fix_skewness and not np.any(theta.lam)
    trace = []
    events = []
    converged = False
    ll_prev = approx_loglik(theta, spanel, b_tilde, curve)
    plateaued = False
    history = []  # iterates linked by full, guarded steps
    polish_misses = 0
    for it in range(cfg.max_iter):
        if not history:
            history = [theta]
        lins = [linearize(curve, s.t, s.y, theta.beta, bt) for s, bt in zip(spanel, b_tilde)]
        ll_start = linearized_loglik(theta, lins)
        jumped = bool(events) and events[-1]["event"] == "extrapolation" and events[-1]["iteration"] == it - 1
        if it > 0 and not jumped and ll_start < trace[-1]["ll_lin_end"] - cfg.monotone_tol * abs(ll_start):
            events.append({"iteration": it, "event": "relinearization_decrease",
                           "before": trace[-1]["ll_lin_end"], "after": ll_start})
            log.debug("iteration %d: relinearization lowered the loglik %.6f -> %.6f",
                      it, trace[-1]["ll_lin_end"], ll_start)
        old = theta
        ll_inner = [ll_start]
        for _ in range(cfg.inner_em):
            # beta first, then the dispersion parameters from a fresh E-step
            moms = [_e_step(theta, lin, i) for i, lin in enumerate(lins)]
            if cfg.beta_step == "marginal":
                theta = replace(theta, beta=_update_beta(theta, lins, moms))
            else:
                theta = replace(theta, beta=_update_beta_full(theta, lins, moms))
                shared = getattr(curve, "random_index", None)
                if cfg.beta_step == "hybrid" and shared:
                    # the fixed effects that share a column with b move slowly
                    # under the full augmentation; redo them with b integrated out
                    moms = [_e_step(theta, lin, i) for i, lin in enumerate(lins)]
                    theta = replace(theta, beta=_update_beta(theta, lins, moms, shared))
            moms = [_e_step(theta, lin, i) for i, lin in enumerate(lins)]
            update_skew = family.skew and not cfg.fix_skewness and not skew_pending
            theta = _m_step(theta, lins, moms, update_skew, cfg.ridge, cfg.skew_bound)
            if cfg.scale_step:
                theta = _rescale_dispersion(theta, lins)
            if update_skew and cfg.skew_step:
                theta = _profile_skewness(theta, lins, cfg.skew_bound)
            theta = _profile_nu(theta, lins, cfg)
            theta_em = theta
            if cfg.polish and polish_misses < 2:
                theta = _polish(theta, lins, cfg, update_skew)
            ll_inner.append(linearized_loglik(theta, lins))
            if ll_inner[-1] < ll_inner[-2] - cfg.monotone_tol * abs(ll_inner[-2]):
                events.append({"iteration": it, "event": "inner_em_decrease",
                               "before": ll_inner[-2], "after": ll_inner[-1]})
                log.warning("iteration %d: EM sweep lowered the linearized loglik %.10f -> %.10f",
                            it, ll_inner[-2], ll_inner[-1])
        if skew_pending and (plateaued or it + 1 >= cfg.skew_warmup or it + 1 == cfg.max_iter):
            theta = _start_skewness(theta, lins, cfg)
            theta_em = theta
            skew_pending = False
            events.append({"iteration": it, "event": "skewness_start", "lambda": theta.lam.tolist()})
            old = replace(old, lam=theta.lam)
            ll_ref = -np.inf  # a restart, not a step to be guarded
        else:
            ll_ref = ll_prev
        # candidates in order: polished sweep, plain sweep, plain sweep with beta held
        candidates = [theta]
        if theta_em is not theta:
            candidates.append(theta_em)
        if np.any(theta_em.beta != old.beta):
            candidates.append(replace(theta_em, beta=old.beta))
        proposal = None
        for k, cand in enumerate(candidates):
            try:
                trial = _damped_step(old, cand, b_tilde, ll_ref, spanel, curve, cfg)
            except NumericalError:
                trial = None
            if trial is not None and (proposal is None or trial[2] > proposal[2]):
                proposal = trial
                if cand is theta_em and cand is not theta:
                    ll_inner[-1] = linearized_loglik(cand, lins)
            if proposal is not None and proposal[3] == 1.0:
                break
            if k + 1 < len(candidates):
                events.append({"iteration": it, "event": "fallback_step", "candidate": k + 1})
        if theta is not theta_em:
            # a polish the guard keeps rejecting only costs time; drop it for this fit
            polish_misses = 0 if proposal is not None and proposal[0] is not old and k == 0 else polish_misses + 1
        if proposal is None:
            if not np.isfinite(ll_ref):
                raise NumericalError("no finite likelihood along the update direction after step-halving")
            proposal = (old, b_tilde, ll_ref, 0.0)
        theta, b_tilde, ll, step = proposal
        if step == 0.0:
            # the update no longer climbs the approximate loglik
            events.append({"iteration": it, "event": "plateau"})
        elif step < 1.0:
            events.append({"iteration": it, "event": "step_halving", "step": step})
        dpar = _param_change(old, theta)
        dll = abs(ll - ll_prev) / max(abs(ll_prev), 1e-12)
        trace.append({"iteration": it, "ll_lin_start": ll_start, "ll_lin_end": ll_inner[-1],
                      "ll_inner": ll_inner, "loglik": ll, "rel_loglik_change": dll, "rel_param_change": dpar,
                      "step": step, "nu": list(theta.mixing.params), "sigma2": theta.sigma2})
        ll_prev = ll
        plateaued = step == 0.0
        if plateaued and not skew_pending:
            converged = True
            break
        if dll < cfg.tol_loglik and dpar < cfg.tol_param and not skew_pending and step == 1.0:
            converged = True
            break
        history = history + [theta] if step == 1.0 and np.isfinite(ll_ref) else []
        if cfg.accelerate and len(history) == 3:
            jump = _extrapolate(*history, b_tilde, ll, spanel, curve, cfg)
            if jump is not None:
                theta, b_tilde, ll_prev, a = jump
                events.append({"iteration": it, "event": "extrapolation", "a": a, "loglik": ll_prev})
            history = [theta]
    if not converged:
        log.info("fit of family %s stopped after %d iterations without converging", family.name, len(trace))

    loglik = approx_loglik(theta, spanel, b_tilde, curve)
    u_hat = mixing_weights(theta, spanel, b_tilde, curve)
    p = n_free_params(curve.n_fixed, q, family)
    ic = info_criteria(loglik, p, spanel.n_obs)
    return FitResult(theta, family, b_tilde, u_hat, loglik, ic["aic"], ic["bic"], p, spanel.n_obs, trace,
                     converged, spanel, curve, cfg, events)


def _blend(old: Theta, new: Theta, step: float) -> Theta:
    """Point a fraction ``step`` of the way from ``old`` to ``new``."""
    if step == 1.0:
        return new
    mix = new.mixing
    if mix.kind != "normal":
        mix = mix.with_params(*[a + step * (b - a) for a, b in zip(old.mixing.params, new.mixing.params)])
    return Theta(old.beta + step * (new.beta - old.beta), old.sigma2 + step * (new.sigma2 - old.sigma2),
                 old.D + step * (new.D - old.D), old.lam + step * (new.lam - old.lam), mix)


def _damped_step(old: Theta, new: Theta, b_prev, ll_prev, panel, curve, cfg):
    """Move to ``new`` with step-halving on the approximate loglik.

    Each trial point gets its own empirical Bayes fixed point b~(theta), so
    the approximate loglik is compared as a function of theta alone.  The
    full step is kept unless it makes the loglik non-finite or lowers it by
    more than ``cfg.backtrack_tol`` (relative); then the parameter move is
    halved, up to ``cfg.max_halvings`` times.  A full step that lowers the
    loglik by less than ``cfg.tol_loglik`` (relative) marks a plateau: the
    previous iterate is returned unchanged with ``step = 0``, as it is
    when only a shortened step is accepted and it gains less than that.
    """
    step = 1.0
    scale = max(1.0, abs(ll_prev)) if np.isfinite(ll_prev) else 1.0
    shared = list(getattr(curve, "random_index", ()))
    for _ in range(cfg.max_halvings + 1):
        theta = _blend(old, new, step)
        # moving a shared fixed effect by m and b~ by -m leaves the curve unchanged
        base = b_prev.copy()
        if shared:
            base[:, :len(shared)] -= theta.beta[shared] - old.beta[shared]
        try:
            b_new = _eb_fixed_point(theta, panel, curve, base, cfg)
            ll = approx_loglik(theta, panel, b_new, curve)
        except (NumericalError, ValueError, np.linalg.LinAlgError, linalg.LinAlgError):
            ll = -np.inf
        if np.isfinite(ll) and (not np.isfinite(ll_prev) or ll >= ll_prev - cfg.backtrack_tol * scale):
            if step < 1.0 and ll < ll_prev + cfg.tol_loglik * scale:
                # a shortened step that gains nothing measurable: treat as stationary
                return old, b_prev, ll_prev, 0.0
            return theta, b_new, ll, step
        if step == 1.0 and np.isfinite(ll) and ll >= ll_prev - cfg.tol_loglik * scale:
            return old, b_prev, ll_prev, 0.0
        step /= 2.0
    raise NumericalError("no finite likelihood along the update direction after step-halving")


def _eb_fixed_point(theta: Theta, panel, curve, b_start, cfg) -> np.ndarray:
    """Iterate the empirical Bayes map b~ <- E{b | y; linearized at b~}.

    Subjects do not interact at fixed theta, so each one iterates until its
    own change is below ``cfg.eb_tol``.
    """
    b = np.array(b_start, dtype=float)
    for i, s in enumerate(panel):
        bi = b[i]
        for _ in range(cfg.eb_max_iter):
            new = _eb_one(theta, *_eb_inputs(curve, s, theta.beta, bi), i)[0]
            if not np.all(np.isfinite(new)):
                raise NumericalError("empirical Bayes iteration produced non-finite random effects")
            done = np.max(np.abs(new - bi)) <= cfg.eb_tol * (1.0 + np.max(np.abs(new)))
            bi = new
            if done:
                break
        else:
            log.debug("empirical Bayes iteration for subject %d stopped after %d steps", i, cfg.eb_max_iter)
        b[i] = bi
    return b


def _eb_inputs(curve: Curve, s, beta, bt):
    lin = linearize(curve, s.t, s.y, beta, bt)
    return lin.H, s.y - lin.eta + lin.H @ bt


def _start_skewness(theta: Theta, lins: list, cfg: FitConfig) -> Theta:
    """Move lambda off zero, where the skewness update has a fixed point.

    Tries every sign/magnitude combination from ``cfg.skew_grid`` on the
    linearized likelihood, keeping D, and returns the best candidate.
    """
    q = theta.q
    best, best_ll = None, -np.inf
    grids = np.array(np.meshgrid(*([cfg.skew_grid] * q))).reshape(q, -1).T
    for lam in grids:
        cand = replace(theta, lam=np.asarray(lam, dtype=float))
        try:
            ll = linearized_loglik(cand, lins)
        except (NumericalError, ValueError):
            continue
        if ll > best_ll:
            best, best_ll = cand, ll
    if best is None:
        raise ModelError("no admissible starting value for the skewness parameters")
    return best


# ---------------------------------------------------------------------------
# Model selection
# ---------------------------------------------------------------------------


@dataclass
class SelectionRow:
    family: str
    loglik: float
    aic: float
    bic: float
    n_params: int
    converged: bool
    error: str | None = None
    result: FitResult | None = None


def model_selection(panel: PreparedPanel, families=("n", "sn", "t", "st"), config: FitConfig | None = None,
                    curve: Curve | None = None) -> list:
    """Fit each family and rank by AIC (then BIC, then fewer parameters).

    A failed fit becomes a row with ``error`` set and is ranked last.
    """
    if not families:
        raise ValueError("no families requested")
    rows = []
    for name in families:
        fam = Family.from_name(name)
        try:
            res = fit(panel, fam, config, curve)
            rows.append(SelectionRow(fam.name, res.loglik, res.aic, res.bic, res.n_params, res.converged,
                                     None, res))
        except (ModelError, NumericalError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("family %s failed: %s", fam.name, exc)
            rows.append(SelectionRow(fam.name, np.nan, np.inf, np.inf,
                                     n_free_params((curve or GeneralizedLogisticCurve()).n_fixed,
                                                   (curve or GeneralizedLogisticCurve()).n_random, fam),
                                     False, str(exc)))
    rows.sort(key=lambda r: (r.aic, r.bic, r.n_params))
    return rows


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def fit_to_dict(res: FitResult) -> dict:
    from .data_io import panel_to_text

    return {
        "family": res.family.name,
        "theta": res.theta.to_dict(),
        "subjects": res.panel.names,
        "b_hat": res.b_hat.tolist(),
        "u_hat": res.u_hat.tolist(),
        "loglik": res.loglik,
        "aic": res.aic,
        "bic": res.bic,
        "n_params": res.n_params,
        "n_obs": res.n_obs,
        "converged": res.converged,
        "iterations": res.iterations,
        "trace": [{k: v for k, v in tr.items() if k != "ll_inner"} for tr in res.trace],
        "events": res.events,
        "curve": res.curve.to_dict(),
        "config": res.config.to_dict(),
        "panel": panel_to_text(res.panel),
    }


def fit_from_dict(d: dict) -> FitResult:
    from .data_io import panel_from_text

    cfg_d = dict(d.get("config", {}))
    cfg = FitConfig(**{k: v for k, v in cfg_d.items() if k not in ("nu_init", "skew_grid", "nu_bounds")})
    cfg.nu_init = tuple(cfg_d["nu_init"]) if cfg_d.get("nu_init") else None
    cfg.skew_grid = tuple(cfg_d.get("skew_grid", cfg.skew_grid))
    cfg.nu_bounds = {k: tuple(tuple(x) if isinstance(x, list) else x for x in v)
                     for k, v in cfg_d.get("nu_bounds", {}).items()}
    return FitResult(Theta.from_dict(d["theta"]), Family.from_name(d["family"]), np.array(d["b_hat"]),
                     np.array(d["u_hat"]), d["loglik"], d["aic"], d["bic"], d["n_params"], d["n_obs"],
                     d["trace"], d["converged"], panel_from_text(d["panel"]), curve_from_dict(d["curve"]),
                     cfg, d.get("events", []))
