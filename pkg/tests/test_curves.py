import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from smsn_nlme.curves import (CurveParams, GeneralizedLogisticCurve, LinearCurve, cumulative, eta, grad_eta,
                              peak_time, total_asymptote)

# published Table 4 rows (alpha1 shared, on the original deaths scale)
ALPHA1 = 78_771_346.0
ALPHA4 = 18.55
BRAZIL = CurveParams(ALPHA1, 1.436, 0.031, ALPHA4)
BELGIUM = CurveParams(ALPHA1, 1.619, 0.073, ALPHA4)


def eta_p(t, p: CurveParams):
    """Direct transcription of the curve, used as an independent evaluation."""
    e = np.exp(-p.alpha3 * np.asarray(t, dtype=float))
    return p.alpha1 * p.alpha3 * p.alpha4 * e / (p.alpha2 + e) ** (p.alpha4 + 1)


def beta_of(p: CurveParams):
    return np.log([p.alpha1, p.alpha2, p.alpha3, p.alpha4])


def test_eta_at_zero_unit_params():
    assert eta(0.0, np.zeros(4))[()] == pytest.approx(0.25, abs=1e-15)


def test_eta_matches_transcription():
    t = np.linspace(-50, 300, 71)
    np.testing.assert_allclose(eta(t, beta_of(BRAZIL)), eta_p(t, BRAZIL), rtol=1e-12)


def test_eta_finite_far_left():
    v = eta(np.array([-1e5, -1e3]), beta_of(BRAZIL))
    assert np.all(np.isfinite(v)) and np.all(v >= 0)


def test_peak_at_zero_when_a2_equals_a4():
    p = CurveParams(3.0, 2.5, 0.4, 2.5)
    assert peak_time(p) == 0.0
    grid = np.linspace(-20, 20, 4001)
    assert abs(grid[np.argmax(eta_p(grid, p))]) < 1e-9 + 0.01


def test_peak_time_simple():
    assert peak_time(CurveParams(1.0, 1.0, 1.0, math.e)) == pytest.approx(1.0, abs=1e-15)


def test_brazil_peak():
    tp = peak_time(BRAZIL)
    assert tp == pytest.approx(82.5, abs=0.1)
    b = beta_of(BRAZIL)
    assert eta(82.5, b) > eta(60.0, b) and eta(82.5, b) > eta(100.0, b)
    # Brazil's first death was 2020-03-17; the published peak date is 2020-06-08
    assert dt.date(2020, 3, 17) + dt.timedelta(days=round(tp)) == dt.date(2020, 6, 8)


def test_total_asymptote_values():
    assert total_asymptote(CurveParams(1.0, 1.0, 0.3, 4.0)) == 1.0
    assert total_asymptote(BRAZIL) == pytest.approx(95_476, rel=0.01)
    assert total_asymptote(BELGIUM) == pytest.approx(10_304, rel=0.01)


def test_cumulative_simple_and_limit():
    assert cumulative(0.0, CurveParams(1.0, 1.0, 1.0, 1.0)) == pytest.approx(0.5, abs=1e-15)
    assert cumulative(1e4, BRAZIL) == pytest.approx(total_asymptote(BRAZIL), rel=1e-12)


@pytest.mark.parametrize("t", [-10.0, 40.0, 82.5, 150.0])
def test_cumulative_is_integral_of_eta(t):
    ref = integrate.quad(lambda s: eta_p(s, BRAZIL), -2000, t, limit=400, epsrel=1e-12)[0]
    assert cumulative(t, BRAZIL) == pytest.approx(ref, rel=1e-6)


def _fd(t, beta, b, h=1e-6):
    x = np.concatenate([beta, b])
    cols = []
    for k in range(6):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        cols.append((eta(t, xp[:4], xp[4:]) - eta(t, xm[:4], xm[4:])) / (2 * h))
    return np.array(cols)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(50):
        beta = np.array([rng.uniform(0, 5), rng.uniform(-1, 1), rng.uniform(-4, -1), rng.uniform(-1, 3)])
        b = rng.normal(scale=0.3, size=2)
        t = rng.uniform(0, 150)
        db, dbb = grad_eta(t, beta, b)
        fd = _fd(t, beta, b)
        scale = np.max(np.abs(fd)) + 1e-300
        np.testing.assert_allclose(np.concatenate([db[0], dbb[0]]) / scale, fd / scale, atol=1e-5)


def test_gradient_wrt_beta1_is_eta():
    beta = beta_of(BRAZIL)
    t = np.arange(0, 200, 7.0)
    db, _ = grad_eta(t, beta)
    np.testing.assert_allclose(db[:, 0], eta(t, beta), rtol=1e-14)


def test_gradient_wrt_b1_vanishes_for_huge_a2():
    _, dbb = grad_eta(np.array([0.0, 10.0]), np.zeros(4), np.array([60.0, 0.0]))
    assert np.all(np.abs(dbb[:, 0]) < 1e-20)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 5), st.floats(0.3, 3), st.floats(0.01, 0.5), st.floats(0.3, 20), st.floats(-500, 500))
def test_eta_positive_and_peak_is_max(a1, a2, a3, a4, t):
    p = CurveParams(a1, a2, a3, a4)
    beta = beta_of(p)
    assert eta(t, beta) >= 0
    tp = peak_time(p)
    for eps in (0.1, 1.0, 10.0):
        assert eta(tp, beta) >= eta(tp + eps, beta)
        assert eta(tp, beta) >= eta(tp - eps, beta)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 3), st.floats(0.02, 0.3), st.floats(0.5, 20), st.floats(-100, 300))
def test_cumulative_monotone_and_derivative(a2, a3, a4, t):
    p = CurveParams(2.0, a2, a3, a4)
    assert cumulative(t + 1.0, p) >= cumulative(t, p)
    h = 1e-4
    deriv = (cumulative(t + h, p) - cumulative(t - h, p)) / (2 * h)
    # cancellation in the difference quotient limits accuracy to ~ eps * total / h
    floor = 1e-15 * total_asymptote(p) / h
    assert deriv == pytest.approx(eta(t, beta_of(p))[()], rel=1e-5, abs=10 * floor)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(-50, 300))
def test_scale_equivariance(k, t):
    q = BRAZIL.scaled(k)
    assert eta(t, beta_of(q)) == pytest.approx(k * eta(t, beta_of(BRAZIL)), rel=1e-10)
    assert cumulative(t, q) == pytest.approx(k * cumulative(t, BRAZIL), rel=1e-10)
    assert total_asymptote(q) == pytest.approx(k * total_asymptote(BRAZIL), rel=1e-10)
    assert peak_time(q) == peak_time(BRAZIL)


def test_eta_far_tails_vanish():
    beta = beta_of(BRAZIL)
    assert eta(-5000.0, beta) < 1e-30 and eta(5000.0, beta) < 1e-30


def test_curve_params_validation():
    with pytest.raises(ValueError):
        CurveParams(1.0, -1.0, 1.0, 1.0)


def test_curve_objects():
    g = GeneralizedLogisticCurve()
    t = np.arange(5.0)
    beta, b = beta_of(BRAZIL), np.array([0.1, -0.05])
    db, dbb = g.jacobians(t, beta, b)
    fd_b, fd_bb = super(GeneralizedLogisticCurve, g).jacobians(t, beta, b)
    np.testing.assert_allclose(db, fd_b, rtol=1e-5)
    np.testing.assert_allclose(dbb, fd_bb, rtol=1e-5)
    lin = LinearCurve(1, 1)
    np.testing.assert_allclose(lin.eta(t, [1.0, 2.0], [0.5, -1.0]), 1.5 + t)
