"""Scale mixtures of skew-normal (SMSN) distributions.

A p-variate SMSN vector is ``Y = mu + U**(-1/2) Z`` with
``Z ~ SN_p(0, Sigma, lambda)`` and a positive mixing scale ``U ~ H(.; nu)``
independent of ``Z``.  Setting ``lambda = 0`` gives the symmetric scale
mixtures of normal (SMN) subclass.

Every density here is returned on the log scale.  Integrals over the
mixing law are done in ``s = log(u)`` after locating the mode of the
integrand, so that long response vectors (which make the integrand very
peaked) do not underflow.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special, stats

log = logging.getLogger(__name__)

LOG2 = np.log(2.0)
LOG2PI = np.log(2.0 * np.pi)
SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)

MIXING_KINDS = ("normal", "t", "slash", "cn")


class NumericalError(ArithmeticError):
    """Raised when a quadrature or factorization cannot be trusted."""


class MomentUndefinedError(ValueError):
    """Raised when E{U^(-1/2)} does not exist for the requested law."""


# ---------------------------------------------------------------------------
# Mixing laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixingLaw:
    """Distribution H(u; nu) of the positive scale factor U.

    ``kind`` is one of ``normal`` (U = 1), ``t`` (U ~ Gamma(nu/2, rate nu/2)),
    ``slash`` (U ~ Beta(nu, 1)) or ``cn`` (U = gamma with probability nu,
    else 1).
    """

    kind: str = "normal"
    nu: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in MIXING_KINDS:
            raise ValueError(f"unknown mixing law {self.kind!r}; expected one of {MIXING_KINDS}")
        if self.kind == "normal":
            return
        if self.nu is None or not np.isfinite(self.nu):
            raise ValueError(f"{self.kind} mixing needs a finite nu")
        if self.kind in ("t", "slash") and not self.nu > 0:
            raise ValueError(f"{self.kind} mixing needs nu > 0, got {self.nu}")
        if self.kind == "cn":
            if not 0 < self.nu < 1:
                raise ValueError(f"contaminated normal needs 0 < nu < 1, got {self.nu}")
            if self.gamma is None or not 0 < self.gamma < 1:
                raise ValueError(f"contaminated normal needs 0 < gamma < 1, got {self.gamma}")

    @classmethod
    def normal(cls) -> "MixingLaw":
        return cls("normal")

    @classmethod
    def student_t(cls, nu: float) -> "MixingLaw":
        return cls("t", float(nu))

    @classmethod
    def slash(cls, nu: float) -> "MixingLaw":
        return cls("slash", float(nu))

    @classmethod
    def contaminated(cls, nu: float, gamma: float) -> "MixingLaw":
        return cls("cn", float(nu), float(gamma))

    @property
    def params(self) -> tuple:
        """Free shape parameters as a tuple (empty for the normal law)."""
        if self.kind == "normal":
            return ()
        if self.kind == "cn":
            return (self.nu, self.gamma)
        return (self.nu,)

    @property
    def n_params(self) -> int:
        return len(self.params)

    def with_params(self, *values) -> "MixingLaw":
        if self.kind == "normal":
            return self
        if self.kind == "cn":
            return MixingLaw("cn", float(values[0]), float(values[1]))
        return MixingLaw(self.kind, float(values[0]))

    def k1(self) -> float:
        return k1(self)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "normal":
            return np.ones(size)
        if self.kind == "t":
            return rng.gamma(self.nu / 2.0, 2.0 / self.nu, size=size)
        if self.kind == "slash":
            return rng.beta(self.nu, 1.0, size=size)
        return np.where(rng.random(size) < self.nu, self.gamma, 1.0)

    def _log_measure_s(self, s: np.ndarray) -> np.ndarray:
        """log of h(e^s) e^s, the mixing density after the s = log u change."""
        if self.kind == "t":
            a = self.nu / 2.0
            return a * np.log(a) - special.gammaln(a) + a * s - a * np.exp(s)
        if self.kind == "slash":
            return np.log(self.nu) + self.nu * s
        raise AssertionError("discrete mixing laws do not need quadrature")

    def _s_bounds(self) -> tuple[float, float]:
        return (-np.inf, 0.0) if self.kind == "slash" else (-np.inf, np.inf)

    def __str__(self):
        if self.kind == "normal":
            return "normal"
        if self.kind == "cn":
            return f"cn(nu={self.nu:.6g}, gamma={self.gamma:.6g})"
        return f"{self.kind}(nu={self.nu:.6g})"


def k1(mixing: MixingLaw) -> float:
    """E{U^(-1/2)} for the mixing law.

    Raises
    ------
    MomentUndefinedError
        For Student-t mixing with ``nu <= 1`` or slash mixing with
        ``nu <= 1/2``.
    """
    kind = mixing.kind
    if kind == "normal":
        return 1.0
    nu = mixing.nu
    if kind == "t":
        if nu <= 1:
            raise MomentUndefinedError(f"E{{U^-1/2}} is undefined for t mixing with nu={nu} <= 1")
        return float(np.sqrt(nu / 2.0) * np.exp(special.gammaln((nu - 1) / 2.0) - special.gammaln(nu / 2.0)))
    if kind == "slash":
        if nu <= 0.5:
            raise MomentUndefinedError(f"E{{U^-1/2}} is undefined for slash mixing with nu={nu} <= 1/2")
        return nu / (nu - 0.5)
    return float(nu / np.sqrt(mixing.gamma) + 1.0 - nu)


# ---------------------------------------------------------------------------
# Linear algebra helpers
# ---------------------------------------------------------------------------


def sym_sqrt(M: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Symmetric (spectral) square root of a positive-definite matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    w, V = np.linalg.eigh((M + M.T) / 2.0)
    if w[0] <= 0:
        raise ValueError("matrix is not positive definite")
    r = w ** (-0.5 if inverse else 0.5)
    return (V * r) @ V.T


def skew_vectors(Sigma, lam) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(delta, Delta, zeta)`` for a dispersion matrix and skewness.

    ``delta = lam / sqrt(1 + lam'lam)``, ``Delta = Sigma^{1/2} delta`` and
    ``zeta = Sigma^{-1/2} lam``, all with the symmetric square root.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    delta = lam / np.sqrt(1.0 + lam @ lam)
    w, V = np.linalg.eigh((Sigma + Sigma.T) / 2.0)
    if w[0] <= 0:
        raise ValueError("dispersion matrix is not positive definite")
    Delta = (V * np.sqrt(w)) @ (V.T @ delta)
    zeta = (V / np.sqrt(w)) @ (V.T @ lam)
    return delta, Delta, zeta


def _standardize(y, mu, Sigma, lam):
    """Mahalanobis distances, skew arguments and log|Sigma| for rows of y."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    p = Sigma.shape[0]
    if Sigma.shape != (p, p):
        raise ValueError(f"Sigma must be square, got shape {Sigma.shape}")
    y = np.asarray(y, dtype=float)
    single = y.ndim <= 1
    if single:
        if y.size != p:
            raise ValueError(f"y has {y.size} entries, Sigma has dimension {p}")
        y = y.reshape(1, p)
    if y.ndim != 2 or y.shape[1] != p:
        raise ValueError(f"y has dimension {y.shape[1]}, Sigma has dimension {p}")
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (p,))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (p,))
    w, V = np.linalg.eigh((Sigma + Sigma.T) / 2.0)
    if not np.all(np.isfinite(w)) or w[0] <= 0:
        raise ValueError("Sigma is not positive definite")
    z = ((y - mu) @ V) / np.sqrt(w) @ V.T
    return np.sum(z * z, axis=1), z @ lam, float(np.sum(np.log(w))), p, single


# ---------------------------------------------------------------------------
# Quadrature over the mixing variable
# ---------------------------------------------------------------------------

_GL64 = np.polynomial.legendre.leggauss(64)


def _log_quad(logg, lo: float, hi: float) -> float:
    """log of the integral of exp(logg(s)) over (lo, hi); logg is unimodal."""
    a = max(lo, -60.0)
    b = min(hi, 60.0)
    grid = np.linspace(a, b, 481)
    vals = logg(grid)
    if not np.any(np.isfinite(vals)):
        raise NumericalError("mixing integrand is not finite anywhere on the search grid")
    k = int(np.nanargmax(vals))
    left, right = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = optimize.minimize_scalar(lambda s: -logg(np.array([s]))[0], bounds=(left, right),
                                   method="bounded", options={"xatol": 1e-10})
    s_star, m = (res.x, -res.fun) if -res.fun >= vals[k] else (grid[k], vals[k])
    drop = 60.0

    def edge(direction, bound):
        h = 1e-3
        while True:
            s = s_star + direction * h
            if (direction < 0 and s <= bound) or (direction > 0 and s >= bound):
                return bound
            if logg(np.array([s]))[0] < m - drop:
                return s
            h *= 1.6

    s_lo = edge(-1, max(lo, -700.0))
    s_hi = edge(+1, min(hi, 700.0))

    def f(s):
        return np.exp(logg(np.atleast_1d(s)) - m)[0]

    pts = [s_star] if s_lo < s_star < s_hi else None
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(f, s_lo, s_hi, points=pts, epsabs=0.0, epsrel=1e-11, limit=200)
        except integrate.IntegrationWarning as exc:
            log.debug("adaptive quadrature warned (%s); using 64-point Gauss-Legendre", exc)
            x, wts = _GL64
            s = 0.5 * (s_hi - s_lo) * x + 0.5 * (s_hi + s_lo)
            val = 0.5 * (s_hi - s_lo) * np.sum(wts * np.exp(logg(s) - m))
    if not np.isfinite(val) or val <= 0:
        raise NumericalError(f"mixing quadrature failed (mode s={s_star:.4g}, log-max={m:.4g}, "
                             f"interval=({s_lo:.4g}, {s_hi:.4g}), value={val})")
    return m + np.log(val)


def _log_mix_integral(logf, mixing: MixingLaw) -> float:
    """log of the integral of exp(logf(u)) dH(u; nu)."""
    if mixing.kind == "normal":
        return float(logf(np.array([1.0]))[0])
    if mixing.kind == "cn":
        v = logf(np.array([mixing.gamma, 1.0]))
        return float(np.logaddexp(np.log(mixing.nu) + v[0], np.log1p(-mixing.nu) + v[1]))
    lo, hi = mixing._s_bounds()
    return _log_quad(lambda s: logf(np.exp(s)) + mixing._log_measure_s(s), lo, hi)


def _t_logcdf(x, df):
    """log of the Student-t cdf; ``stdtr`` with a log-domain fallback in the far tail."""
    if np.ndim(x) == 0 and np.ndim(df) == 0:
        x, df = float(x), float(df)
        if x > 0:
            return float(np.log1p(-special.stdtr(df, -x)))
        cdf = special.stdtr(df, x)
        return float(np.log(cdf)) if cdf >= 1e-280 else float(stats.t.logcdf(x, df))
    x, df = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(df, dtype=float))
    cdf = special.stdtr(df, x)
    with np.errstate(divide="ignore"):
        out = np.where(x > 0, np.log1p(-special.stdtr(df, -x)), np.log(cdf))
    tail = cdf < 1e-280
    if np.any(tail):
        out = np.where(tail, stats.t.logcdf(x, df), out)
    return out if out.ndim else float(out)


def _log_phi(x):
    return -0.5 * LOG2PI - 0.5 * x * x


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def _logpdf_core(maha: float, A: float, logdet: float, p: int, mixing: MixingLaw,
                 method: str = "auto") -> float:
    const = LOG2 - 0.5 * p * LOG2PI - 0.5 * logdet
    if mixing.kind == "normal":
        return const - 0.5 * maha + special.log_ndtr(A)
    if mixing.kind == "t" and method == "auto":
        nu = mixing.nu
        logt = (special.gammaln((nu + p) / 2.0) - special.gammaln(nu / 2.0)
                - 0.5 * p * np.log(nu * np.pi) - 0.5 * logdet
                - 0.5 * (nu + p) * np.log1p(maha / nu))
        arg = A * np.sqrt((nu + p) / (nu + maha))
        return LOG2 + logt + _t_logcdf(arg, nu + p)

    def logf(u):
        return 0.5 * p * np.log(u) - 0.5 * u * maha + special.log_ndtr(np.sqrt(u) * A)

    return const + _log_mix_integral(logf, mixing)


def sn_logpdf(y, mu, Sigma, lam):
    """Log density of the multivariate skew-normal SN_p(mu, Sigma, lam).

    ``log(2) + log phi_p(y; mu, Sigma) + log Phi(lam' Sigma^{-1/2} (y - mu))``
    with the symmetric square root of Sigma.  ``y`` may be a single
    p-vector or an (n, p) array of points.
    """
    maha, A, logdet, p, single = _standardize(y, mu, Sigma, lam)
    out = LOG2 - 0.5 * p * LOG2PI - 0.5 * logdet - 0.5 * maha + special.log_ndtr(A)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class SmsnParams:
    """One multivariate SMSN law: location, dispersion, skewness, mixing."""

    mu: np.ndarray
    Sigma: np.ndarray
    lam: np.ndarray
    mixing: MixingLaw = field(default_factory=MixingLaw)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        p = mu.size
        Sigma = np.asarray(self.Sigma, dtype=float).reshape(p, p) if np.size(self.Sigma) == p * p else None
        if Sigma is None:
            raise ValueError(f"Sigma must be {p}x{p}")
        lam = np.broadcast_to(np.asarray(self.lam, dtype=float), (p,)).copy()
        try:
            np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            raise ValueError("Sigma is not positive definite") from None
        if not np.allclose(Sigma, Sigma.T, rtol=1e-10, atol=1e-12):
            raise ValueError("Sigma is not symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "lam", lam)

    @property
    def dim(self) -> int:
        return self.mu.size


def smsn_logpdf(y, params: SmsnParams, method: str = "auto"):
    """Log density of SMSN_p(mu, Sigma, lam; H) at y.

    ``method='quad'`` forces the mixing integral to be done numerically
    even where a closed form exists (useful as an independent check).
    """
    maha, A, logdet, p, single = _standardize(y, params.mu, params.Sigma, params.lam)
    out = np.array([_logpdf_core(m, a, logdet, p, params.mixing, method) for m, a in zip(maha, A)])
    return float(out[0]) if single else out


def smn_logpdf(y, mu, Sigma, mixing: MixingLaw):
    """Log density of the symmetric SMN_p(mu, Sigma; H) law."""
    return smsn_logpdf(y, SmsnParams(mu, Sigma, np.zeros(np.size(mu)), mixing))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_sn_standard(Sigma, lam, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n rows from SN_p(0, Sigma, lam)."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    p = Sigma.shape[0]
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (p,))
    delta = lam / np.sqrt(1.0 + lam @ lam)
    t0 = np.abs(rng.standard_normal(n))
    t1 = rng.standard_normal((n, p))
    dd = delta @ delta
    if dd > 0:
        # (I - delta delta')^{1/2} in closed form
        t1 = t1 - np.outer(t1 @ delta, delta) * (1.0 - np.sqrt(1.0 - dd)) / dd
    z0 = np.outer(t0, delta) + t1
    return z0 @ sym_sqrt(Sigma)


def sample_smsn(params: SmsnParams, n: int, rng: np.random.Generator,
                centered: bool = False) -> np.ndarray:
    """Draw n rows via ``Y = mu + U^{-1/2} Z``.

    With ``centered=True`` the location is shifted by ``c Delta`` with
    ``c = -sqrt(2/pi) k1`` so that E{Y} = mu.
    """
    z = sample_sn_standard(params.Sigma, params.lam, n, rng)
    u = params.mixing.sample(rng, n)
    loc = params.mu
    if centered:
        _, Delta, _ = skew_vectors(params.Sigma, params.lam)
        loc = loc - SQRT_2_OVER_PI * k1(params.mixing) * Delta
    return loc + z / np.sqrt(u)[:, None]


# ---------------------------------------------------------------------------
# Conditional expectations of the mixing variable
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionalWeights:
    """Posterior moments of U given an observation.

    kappa  = E{U | y}
    tau_m1 = E{U^{-1/2} W(U^{1/2} a) | y}
    tau_1  = E{U^{1/2} W(U^{1/2} A) | y}
    with W(x) = phi(x)/Phi(x) and A the skew argument of the density.
    """

    kappa: float
    tau_m1: float
    tau_1: float


def _inv_mills(x):
    return np.exp(_log_phi(x) - special.log_ndtr(x))


def _weights_t(maha: float, A: float, p: int, nu: float) -> ConditionalWeights:
    """Closed-form weights for the Student-t mixing law with ``a == A``."""
    m = nu + p
    s = nu + maha
    log_den = (special.gammaln(m / 2.0) - 0.5 * m * np.log(s / 2.0)
               + _t_logcdf(A * np.sqrt(m / s), m))
    log_kappa = (special.gammaln(m / 2.0 + 1.0) - 0.5 * (m + 2.0) * np.log(s / 2.0)
                 + _t_logcdf(A * np.sqrt((m + 2.0) / s), m + 2.0))
    # the phi(u^{1/2} A) factor folds into the gamma kernel
    s_a = s + A * A
    log_tau1 = -0.5 * LOG2PI + special.gammaln((m + 1.0) / 2.0) - 0.5 * (m + 1.0) * np.log(s_a / 2.0)
    log_taum1 = -0.5 * LOG2PI + special.gammaln((m - 1.0) / 2.0) - 0.5 * (m - 1.0) * np.log(s_a / 2.0)
    return ConditionalWeights(float(np.exp(log_kappa - log_den)), float(np.exp(log_taum1 - log_den)),
                              float(np.exp(log_tau1 - log_den)))


def _weights_core(maha: float, A: float, p: int, mixing: MixingLaw, a: float,
                  method: str = "auto") -> ConditionalWeights:
    if mixing.kind == "t" and method == "auto" and a == A and mixing.nu + p > 1.0:
        return _weights_t(maha, A, p, mixing.nu)
    if mixing.kind == "normal":
        return ConditionalWeights(1.0, float(_inv_mills(a)), float(_inv_mills(A)))
    if mixing.kind == "cn":
        u = np.array([mixing.gamma, 1.0])
        lw = (np.log([mixing.nu, 1.0 - mixing.nu]) + 0.5 * p * np.log(u) - 0.5 * u * maha
              + special.log_ndtr(np.sqrt(u) * A))
        w = np.exp(lw - lw.max())
        w /= w.sum()
        return ConditionalWeights(float(w @ u),
                                  float(w @ (_inv_mills(np.sqrt(u) * a) / np.sqrt(u))),
                                  float(w @ (_inv_mills(np.sqrt(u) * A) * np.sqrt(u))))

    def base(u):
        return 0.5 * p * np.log(u) - 0.5 * u * maha

    def den(u):
        return base(u) + special.log_ndtr(np.sqrt(u) * A)

    log_den = _log_mix_integral(den, mixing)
    log_kappa = _log_mix_integral(lambda u: den(u) + np.log(u), mixing)
    log_tau1 = _log_mix_integral(lambda u: base(u) + 0.5 * np.log(u) + _log_phi(np.sqrt(u) * A), mixing)
    log_taum1 = _log_mix_integral(
        lambda u: den(u) - 0.5 * np.log(u) + _log_phi(np.sqrt(u) * a) - special.log_ndtr(np.sqrt(u) * a),
        mixing)
    return ConditionalWeights(float(np.exp(log_kappa - log_den)),
                              float(np.exp(log_taum1 - log_den)),
                              float(np.exp(log_tau1 - log_den)))


def conditional_weights(y, params: SmsnParams, a: float | None = None,
                        method: str = "auto") -> ConditionalWeights:
    """E{U|y} and the truncated-normal weights used by EM and prediction.

    ``a`` is the scalar argument of W inside ``tau_m1``; it defaults to the
    skew argument ``lam' Sigma^{-1/2} (y - mu)`` of the density itself.
    """
    maha, A, _, p, _ = _standardize(y, params.mu, params.Sigma, params.lam)
    if maha.size != 1:
        raise ValueError("conditional_weights takes a single observation vector")
    a = float(A[0]) if a is None else float(a)
    return _weights_core(float(maha[0]), float(A[0]), p, params.mixing, a, method)
