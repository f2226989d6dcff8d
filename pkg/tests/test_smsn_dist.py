import math

import numpy as np
import pytest
from hypothesis import assume, example, given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from smsn_nlme.smsn_dist import (MixingLaw, MomentUndefinedError, SmsnParams, conditional_weights, k1,
                                 sample_smsn, skew_vectors, smn_logpdf, smsn_logpdf, sn_logpdf, sym_sqrt)

LAWS = [MixingLaw.normal(), MixingLaw.student_t(4.0), MixingLaw.slash(2.0), MixingLaw.contaminated(0.3, 0.4)]


def phi(x):
    return math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def Phi_quad(x):
    return integrate.quad(phi, -np.inf, x, epsabs=0, epsrel=1e-13)[0]


# --- sn_logpdf ------------------------------------------------------------


def test_sn_logpdf_origin_univariate():
    assert sn_logpdf(0.0, 0.0, 1.0, 0.0) == pytest.approx(math.log(phi(0.0)), abs=1e-12)
    assert sn_logpdf(0.0, 0.0, 1.0, 0.0) == pytest.approx(-0.918939, abs=1e-6)


def test_sn_logpdf_origin_bivariate():
    assert sn_logpdf(np.zeros(2), np.zeros(2), np.eye(2), np.zeros(2)) == pytest.approx(-1.837877, abs=1e-6)


def test_sn_logpdf_skewed_point_matches_quadrature():
    expected = math.log(2 * phi(1.0) * Phi_quad(1.0))
    assert sn_logpdf(1.0, 0.0, 1.0, 1.0) == pytest.approx(expected, abs=1e-10)
    assert expected == pytest.approx(-0.89858, abs=5e-5)


def test_sn_logpdf_rejects_bad_sigma():
    with pytest.raises(ValueError):
        sn_logpdf(np.zeros(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros(2))


def test_sn_logpdf_uses_symmetric_root():
    # the skew argument is lam' Sigma^{-1/2} (y - mu) with the spectral root
    S = np.array([[2.0, 0.6], [0.6, 1.0]])
    lam = np.array([1.5, -0.7])
    y = np.array([0.4, -1.1])
    w, V = np.linalg.eigh(S)
    root_inv = V @ np.diag(w ** -0.5) @ V.T
    ref = (math.log(2) + stats.multivariate_normal(np.zeros(2), S).logpdf(y)
           + stats.norm.logcdf(lam @ root_inv @ y))
    assert sn_logpdf(y, np.zeros(2), S, lam) == pytest.approx(ref, abs=1e-12)


# --- smsn_logpdf ----------------------------------------------------------


def test_normal_mixing_equals_sn():
    p = SmsnParams([0.3, -0.2], [[1.0, 0.2], [0.2, 0.5]], [2.0, -1.0])
    y = np.array([0.9, 0.1])
    assert smsn_logpdf(y, p) == pytest.approx(sn_logpdf(y, p.mu, p.Sigma, p.lam), abs=1e-14)


def test_t4_density_at_zero():
    closed = special.gamma(2.5) / (math.sqrt(4 * math.pi) * special.gamma(2.0))
    assert closed == pytest.approx(0.375)
    # brute-force: integrate phi(0; 0, 1/u) over the Gamma(2, rate 2) mixing law
    quad = integrate.quad(lambda u: math.sqrt(u) * phi(0.0) * stats.gamma.pdf(u, 2.0, scale=0.5), 0, np.inf)[0]
    assert quad == pytest.approx(0.375, rel=1e-9)
    p = SmsnParams([0.0], [[1.0]], [0.0], MixingLaw.student_t(4.0))
    assert smsn_logpdf(0.0, p) == pytest.approx(math.log(0.375), abs=1e-10)
    assert smsn_logpdf(0.0, p, method="quad") == pytest.approx(math.log(0.375), abs=1e-8)


def test_slash1_density_at_zero():
    quad = integrate.quad(lambda u: math.sqrt(u) * phi(0.0), 0, 1)[0]
    assert math.log(quad) == pytest.approx(-1.32434, abs=1e-4)
    p = SmsnParams([0.0], [[1.0]], [0.0], MixingLaw.slash(1.0))
    assert smsn_logpdf(0.0, p) == pytest.approx(math.log(quad), abs=1e-9)


@pytest.mark.parametrize("law", LAWS[1:], ids=str)
def test_closed_form_matches_quadrature(law):
    p = SmsnParams([0.2, -0.4], [[1.3, -0.3], [-0.3, 0.8]], [3.0, 1.0], law)
    y = np.array([[0.0, 0.0], [2.5, -1.0], [-4.0, 3.0]])
    np.testing.assert_allclose(smsn_logpdf(y, p), smsn_logpdf(y, p, method="quad"), atol=1e-8)


def test_skew_t_matches_direct_mixing_integral():
    # independent route: integrate 2 phi_p(y; mu, Sigma/u) Phi(u^{1/2} A) over Gamma(nu/2, nu/2)
    nu, S, lam = 3.0, np.array([[1.0, 0.4], [0.4, 2.0]]), np.array([-2.0, 1.0])
    y = np.array([1.2, -0.3])
    A = lam @ np.linalg.inv(sym_sqrt(S)) @ y

    def f(u):
        return (2 * stats.multivariate_normal(np.zeros(2), S / u).pdf(y) * stats.norm.cdf(math.sqrt(u) * A)
                * stats.gamma.pdf(u, nu / 2, scale=2 / nu))

    ref = math.log(integrate.quad(f, 0, np.inf, epsrel=1e-12)[0])
    p = SmsnParams(np.zeros(2), S, lam, MixingLaw.student_t(nu))
    assert smsn_logpdf(y, p) == pytest.approx(ref, abs=1e-8)


def test_far_tail_is_finite():
    p = SmsnParams([0.0], [[1.0]], [-20.0], MixingLaw.student_t(3.0))
    assert np.isfinite(smsn_logpdf(200.0, p))
    p = SmsnParams([0.0], [[1.0]], [20.0], MixingLaw.normal())
    assert np.isfinite(smsn_logpdf(-40.0, p))


# --- properties -----------------------------------------------------------


@pytest.mark.parametrize("law", LAWS, ids=str)
@pytest.mark.parametrize("lam", [0.0, 3.0])
def test_normalizes_univariate(law, lam):
    p = SmsnParams([0.5], [[1.5]], [lam], law)
    total = integrate.quad(lambda x: math.exp(smsn_logpdf(x, p)), -np.inf, np.inf, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-2)


@pytest.mark.parametrize("law", LAWS, ids=str)
def test_normalizes_bivariate(law):
    p = SmsnParams([0.0, 0.0], [[1.0, 0.3], [0.3, 0.7]], [2.0, -1.0], law)
    # trapezoid rule on x = sinh(s): dense near the mode, reaches |x| ~ 120 for the heavy tails
    s = np.linspace(-5.5, 5.5, 61)
    g, jac = np.sinh(s), np.cosh(s)
    X, Y = np.meshgrid(g, g)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    dens = np.exp(smsn_logpdf(pts, p)).reshape(X.shape) * np.outer(jac, jac)
    total = integrate.trapezoid(integrate.trapezoid(dens, s, axis=1), s)
    assert total == pytest.approx(1.0, abs=1e-2)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 3.0), st.sampled_from(["normal", "t", "slash", "cn"]))
@example(0.0, 0.0, 1.0, "slash")
@example(0.0, 1e-130, 1.0, "slash")
def test_lambda_zero_is_smn(y1, y2, s, kind):
    S = np.array([[s, 0.2], [0.2, 1.0]])
    y = np.array([y1, y2])
    if kind == "normal":
        law, ref = MixingLaw.normal(), stats.multivariate_normal(np.zeros(2), S).logpdf(y)
    elif kind == "t":
        law, ref = MixingLaw.student_t(3.5), stats.multivariate_t(np.zeros(2), S, df=3.5).logpdf(y)
    elif kind == "cn":
        law = MixingLaw.contaminated(0.25, 0.3)
        ref = math.log(0.25 * stats.multivariate_normal(np.zeros(2), S / 0.3).pdf(y)
                       + 0.75 * stats.multivariate_normal(np.zeros(2), S).pdf(y))
    else:
        # closed form through the regularized lower incomplete gamma function
        law, a = MixingLaw.slash(1.5), 2.5
        m = float(y @ np.linalg.solve(S, y))
        # Gamma(a) P(a, x) / x^a = 1/a - x/(a + 1) + O(x^2) near 0, where P underflows
        x = m / 2
        core = (special.gammaln(a) + math.log(special.gammainc(a, x)) - a * math.log(x)
                if x > 1e-6 else math.log(1 / a - x / (a + 1)))
        ref = math.log(1.5) + core - math.log(2 * math.pi) - 0.5 * math.log(np.linalg.det(S))
    assert smn_logpdf(y, np.zeros(2), S, law) == pytest.approx(ref, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4))
def test_huge_nu_approaches_normal(y, lam):
    # the 1/nu correction grows like the fourth power of both y and lam * y
    assume(abs(lam * y) <= 4)
    pt = SmsnParams([0.0], [[1.0]], [lam], MixingLaw.student_t(1e6))
    pn = SmsnParams([0.0], [[1.0]], [lam], MixingLaw.normal())
    assert smsn_logpdf(y, pt) == pytest.approx(smsn_logpdf(y, pn), abs=1e-4)


def test_huge_nu_gap_is_first_order_in_one_over_nu():
    # log t_nu(y) - log phi(y) = (y^4 - 2 y^2 - 1) / (4 nu) + O(nu^-2); beyond |y| ~ 4 it exceeds 1e-4
    nu, y = 1e6, 5.0
    pt = SmsnParams([0.0], [[1.0]], [0.0], MixingLaw.student_t(nu))
    pn = SmsnParams([0.0], [[1.0]], [0.0], MixingLaw.normal())
    gap = smsn_logpdf(y, pt) - smsn_logpdf(y, pn)
    assert gap == pytest.approx((y ** 4 - 2 * y ** 2 - 1) / (4 * nu), rel=1e-3)


# --- sampling -------------------------------------------------------------


def test_sample_symmetric_normal_mean():
    rng = np.random.default_rng(1)
    p = SmsnParams([1.0, -2.0], [[1.0, 0.5], [0.5, 2.0]], [0.0, 0.0])
    x = sample_smsn(p, 100_000, rng)
    se = x.std(axis=0, ddof=1) / math.sqrt(len(x))
    assert np.all(np.abs(x.mean(axis=0) - p.mu) < 4 * se)


def test_sample_skew_normal_mean():
    delta = 5 / math.sqrt(26)
    # independent route: mean of the SN density by quadrature
    qmean = integrate.quad(lambda x: x * math.exp(sn_logpdf(x, 0.0, 1.0, 5.0)), -np.inf, np.inf)[0]
    assert qmean == pytest.approx(math.sqrt(2 / math.pi) * delta, rel=1e-8)
    assert qmean == pytest.approx(0.78243, abs=5e-5)
    x = sample_smsn(SmsnParams([0.0], [[1.0]], [5.0]), 100_000, np.random.default_rng(2))[:, 0]
    assert abs(x.mean() - qmean) < 4 * x.std() / math.sqrt(x.size)


def test_sample_t_median():
    x = sample_smsn(SmsnParams([0.0], [[1.0]], [0.0], MixingLaw.student_t(3.0)), 100_000,
                    np.random.default_rng(3))[:, 0]
    # standard error of the median of t3: 1 / (2 f(0) sqrt(n))
    se = 1 / (2 * stats.t.pdf(0, 3) * math.sqrt(x.size))
    assert abs(np.median(x)) < 4 * se


@pytest.mark.parametrize("law", [MixingLaw.student_t(5.0), MixingLaw.slash(3.0), MixingLaw.contaminated(0.2, 0.3)],
                         ids=str)
def test_sample_mean_and_centering(law):
    S = np.array([[1.0, 0.3], [0.3, 0.6]])
    lam = np.array([3.0, -1.0])
    p = SmsnParams(np.zeros(2), S, lam, law)
    _, Delta, _ = skew_vectors(S, lam)
    n = 200_000
    x = sample_smsn(p, n, np.random.default_rng(4))
    target = math.sqrt(2 / math.pi) * k1(law) * Delta
    se = x.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(x.mean(axis=0) - target) < 4 * se)
    xc = sample_smsn(p, n, np.random.default_rng(5), centered=True)
    assert np.all(np.abs(xc.mean(axis=0)) < 4 * xc.std(axis=0) / math.sqrt(n))


def test_sampling_is_reproducible():
    p = SmsnParams([0.0], [[1.0]], [2.0], MixingLaw.student_t(4.0))
    a = sample_smsn(p, 10, np.random.default_rng(9))
    b = sample_smsn(p, 10, np.random.default_rng(9))
    assert np.array_equal(a, b)


# --- k1 -------------------------------------------------------------------


def test_k1_values():
    assert k1(MixingLaw.normal()) == 1.0
    u = np.random.default_rng(6).gamma(2.0, 0.5, 1_000_000)
    mc = np.mean(u ** -0.5)
    mc_se = np.std(u ** -0.5) / math.sqrt(u.size)
    assert k1(MixingLaw.student_t(4.0)) == pytest.approx(1.25331, abs=1e-5)
    assert abs(k1(MixingLaw.student_t(4.0)) - mc) < 4 * mc_se
    assert k1(MixingLaw.contaminated(0.3, 0.5)) == pytest.approx(0.3 * 0.5 ** -0.5 + 0.7, abs=1e-12)
    assert k1(MixingLaw.contaminated(0.3, 0.5)) == pytest.approx(1.12426, abs=1e-5)
    slash = integrate.quad(lambda u: u ** -0.5 * 3.0 * u ** 2.0, 0, 1)[0]
    assert k1(MixingLaw.slash(3.0)) == pytest.approx(slash, rel=1e-10)


def test_k1_undefined_for_small_nu():
    with pytest.raises(MomentUndefinedError):
        k1(MixingLaw.student_t(1.0))
    with pytest.raises(MomentUndefinedError):
        k1(MixingLaw.student_t(0.7))


def test_mixing_law_validation():
    with pytest.raises(ValueError):
        MixingLaw.student_t(-1.0)
    with pytest.raises(ValueError):
        MixingLaw.contaminated(1.2, 0.5)
    with pytest.raises(ValueError):
        MixingLaw.contaminated(0.2, 1.0)
    with pytest.raises(ValueError):
        MixingLaw("cauchy", 1.0)


# --- conditional weights -------------------------------------------------


def test_weights_normal():
    p = SmsnParams([0.0, 0.0], np.eye(2), [1.0, 2.0])
    w = conditional_weights(np.array([0.5, -3.0]), p, a=0.0)
    assert w.kappa == 1.0
    assert w.tau_m1 == pytest.approx(phi(0) / 0.5, abs=1e-12)
    assert w.tau_m1 == pytest.approx(0.79788, abs=1e-5)


def test_weights_t4_at_zero():
    p = SmsnParams([0.0], [[1.0]], [0.0], MixingLaw.student_t(4.0))
    num = integrate.quad(lambda u: u * math.sqrt(u) * stats.gamma.pdf(u, 2, scale=0.5), 0, np.inf)[0]
    den = integrate.quad(lambda u: math.sqrt(u) * stats.gamma.pdf(u, 2, scale=0.5), 0, np.inf)[0]
    assert num / den == pytest.approx(1.25, rel=1e-9)
    assert conditional_weights(0.0, p).kappa == pytest.approx(1.25, rel=1e-10)
    assert conditional_weights(0.0, p, method="quad").kappa == pytest.approx(1.25, rel=1e-8)


def _mc_weights(y, p: SmsnParams, a, rng, n=400_000):
    """Importance sampling over U from its prior, weighted by f(y | u)."""
    u = p.mixing.sample(rng, n)
    Sinv_half = np.linalg.inv(sym_sqrt(p.Sigma))
    r = Sinv_half @ (y - p.mu)
    A = p.lam @ r
    logw = 0.5 * y.size * np.log(u) - 0.5 * u * (r @ r) + special.log_ndtr(np.sqrt(u) * A)
    w = np.exp(logw - logw.max())
    W = np.exp(stats.norm.logpdf(np.sqrt(u) * a) - special.log_ndtr(np.sqrt(u) * a))

    def ratio(g):
        est = np.sum(w * g) / np.sum(w)
        # delta-method standard error of a self-normalized estimator
        se = np.sqrt(np.sum((w * (g - est)) ** 2)) / np.sum(w)
        return est, se

    return ratio(u), ratio(W / np.sqrt(u))


def test_weights_match_monte_carlo():
    rng = np.random.default_rng(11)
    laws = [MixingLaw.student_t(3.0), MixingLaw.student_t(8.0), MixingLaw.slash(1.5), MixingLaw.slash(4.0),
            MixingLaw.contaminated(0.2, 0.25)]
    for case in range(20):
        law = laws[case % len(laws)]
        dim = 1 + case % 2
        mu = rng.normal(size=dim)
        L = np.tril(rng.normal(size=(dim, dim))) + 1.5 * np.eye(dim)
        p = SmsnParams(mu, L @ L.T, rng.normal(scale=2, size=dim), law)
        y = mu + rng.normal(scale=2, size=dim)
        a = float(rng.normal(scale=1.5))
        w = conditional_weights(y, p, a=a)
        (k, k_se), (t, t_se) = _mc_weights(y, p, a, rng)
        assert abs(w.kappa - k) < 3 * k_se + 1e-12, (case, w.kappa, k, k_se)
        assert abs(w.tau_m1 - t) < 3 * t_se + 1e-12, (case, w.tau_m1, t, t_se)
