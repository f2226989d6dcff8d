import numpy as np
import pytest
from scipy import optimize, stats

from conftest import glc_panel, linear_panel, linear_theta
from smsn_nlme.curves import GeneralizedLogisticCurve, LinearCurve
from smsn_nlme.data_io import PreparedPanel, Subject
from smsn_nlme.estimation import (Family, FitConfig, ModelError, Theta, approx_loglik, eb_random_effects, fit,
                                  fit_from_dict, fit_to_dict, info_criteria, model_selection, n_free_params)
from smsn_nlme.smsn_dist import MixingLaw, SmsnParams, sample_sn_standard, skew_vectors, smsn_logpdf

TIGHT = FitConfig(tol_loglik=1e-12, tol_param=1e-9, max_iter=500)


# ---------------------------------------------------------------------------
# Information criteria and parameter counts
# ---------------------------------------------------------------------------


def test_info_criteria_published_rows():
    assert info_criteria(-2824.9, 8, 1000)["aic"] == pytest.approx(5665.8, abs=1e-9)
    assert info_criteria(-2343.3, 11, 1000)["aic"] == pytest.approx(4708.6, abs=1e-9)
    assert info_criteria(0.0, 0, 1) == {"aic": 0.0, "bic": 0.0}


def test_parameter_counts():
    assert n_free_params(4, 2, Family.from_name("n")) == 8
    assert n_free_params(4, 2, Family.from_name("sn")) == 10
    assert n_free_params(4, 2, Family.from_name("t")) == 9
    assert n_free_params(4, 2, Family.from_name("st")) == 11


def test_unknown_family():
    with pytest.raises(ValueError, match="unknown family"):
        Family.from_name("cauchy")


# ---------------------------------------------------------------------------
# Approximate likelihood
# ---------------------------------------------------------------------------


def test_gaussian_linear_loglik_is_lme_marginal():
    panel, theta, curve = linear_panel(0, n_subjects=4, n_days=6, curve=LinearCurve(1, 1),
                                       theta=linear_theta(D=[[0.8, 0.1], [0.1, 0.3]]))
    theta = Theta(theta.beta, 1.3, theta.D, np.zeros(2))
    ref = 0.0
    for s in panel:
        X, Z = curve.design(s.t)
        ref += stats.multivariate_normal(X @ theta.beta, Z @ theta.D @ Z.T + 1.3 * np.eye(s.n)).logpdf(s.y)
    b_any = np.random.default_rng(1).normal(size=(4, 2))
    assert approx_loglik(theta, panel, b_any, curve) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("kind", ["normal", "t"])
def test_single_observation_matches_univariate_density(kind):
    mixing = MixingLaw.normal() if kind == "normal" else MixingLaw("t", 5.0)
    D, s2, lam, beta = 0.7, 0.4, 2.5, np.array([1.0, 0.3])
    theta = Theta(beta, s2, [[D]], [lam], mixing)
    y, t = 3.1, 2.0
    # hand-composed scalar law of y = beta0 + beta1 t + b + e
    zeta = lam / np.sqrt(D)
    Lam = 1.0 / (1.0 / D + 1.0 / s2)
    psi = D + s2
    lam_bar = D * zeta / np.sqrt(psi) / np.sqrt(1.0 + zeta ** 2 * Lam)
    delta = lam / np.sqrt(1 + lam ** 2)
    c = theta.c
    mu = beta[0] + beta[1] * t + c * np.sqrt(D) * delta
    ref = smsn_logpdf(np.array([y]), SmsnParams([mu], [[psi]], [lam_bar], mixing))
    panel = PreparedPanel([Subject("A", [t], [y])])
    assert approx_loglik(theta, panel, [[0.4]], LinearCurve(1, 0)) == pytest.approx(float(ref), rel=1e-10)


def test_location_forms_agree_without_skewness():
    panel = glc_panel(3, n_subjects=3, n_days=60)
    theta = Theta([2.0, -1.0, -3.0, 1.2], 0.5, np.diag([0.01, 0.02]), [0.0, 0.0], MixingLaw("t", 4.0))
    b = np.full((3, 2), 0.05)
    a = approx_loglik(theta, panel, b)
    assert approx_loglik(theta, panel, b, location_form="alternative") == pytest.approx(a, rel=1e-14)
    with pytest.raises(ValueError):
        approx_loglik(theta, panel, b, location_form="other")


# ---------------------------------------------------------------------------
# Empirical Bayes random effects
# ---------------------------------------------------------------------------


def test_eb_is_blup_in_gaussian_linear_model():
    curve = LinearCurve(1, 1)
    panel, theta, _ = linear_panel(2, n_subjects=5, n_days=7, curve=curve,
                                   theta=linear_theta(D=[[0.8, 0.1], [0.1, 0.3]]))
    b = eb_random_effects(theta, panel, np.zeros((5, 2)), curve)
    for s, bi in zip(panel, b):
        X, Z = curve.design(s.t)
        psi = Z @ theta.D @ Z.T + theta.sigma2 * np.eye(s.n)
        blup = theta.D @ Z.T @ np.linalg.solve(psi, s.y - X @ theta.beta)
        np.testing.assert_allclose(bi, blup, rtol=1e-10, atol=1e-12)


def test_eb_zero_residual_gives_zero():
    curve = GeneralizedLogisticCurve()
    theta = Theta([2.0, -1.0, -3.0, 1.2], 0.5, np.diag([0.01, 0.02]), [0.0, 0.0])
    t = np.arange(60.0)
    panel = PreparedPanel([Subject("A", t, curve.eta(t, theta.beta, np.zeros(2)))])
    np.testing.assert_allclose(eb_random_effects(theta, panel, np.zeros((1, 2)), curve), 0.0, atol=1e-12)


def _is_posterior_mean(theta: Theta, y, t, draws=10**6, seed=0):
    """Self-normalized importance sampling of E{b | y} from the prior of (U, b)."""
    rng = np.random.default_rng(seed)
    u = theta.mixing.sample(rng, draws)
    _, Delta, _ = skew_vectors(theta.D, theta.lam)
    b = theta.c * Delta[0] + sample_sn_standard(theta.D, theta.lam, draws, rng)[:, 0] / np.sqrt(u)
    r = y[None, :] - (theta.beta[0] + theta.beta[1] * t)[None, :] - b[:, None]
    logw = -0.5 * u * np.sum(r ** 2, axis=1) / theta.sigma2 + 0.5 * len(y) * np.log(u)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = float(w @ b)
    se = float(np.sqrt(np.sum(w ** 2 * (b - mean) ** 2)))
    return mean, se


ST_TOY = Theta([1.0, 0.2], 0.6, [[0.9]], [3.0], MixingLaw("t", 5.0))


def test_eb_matches_importance_sampling_oracle():
    t = np.arange(5.0)
    y = 1.0 + 0.2 * t + np.array([1.9, 1.2, 2.4, 1.5, 1.7])
    panel = PreparedPanel([Subject("A", t, y)])
    b_hat = eb_random_effects(ST_TOY, panel, np.zeros((1, 1)), LinearCurve(1, 0))[0, 0]
    mc, se = _is_posterior_mean(ST_TOY, y, t)
    assert b_hat == pytest.approx(mc, rel=0.02)
    assert abs(b_hat - mc) < 4 * se + 1e-12


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def test_gaussian_linear_fit_matches_classical_lme():
    sm = pytest.importorskip("statsmodels.api")
    curve = LinearCurve(1, 1)
    panel, _, _ = linear_panel(4, n_subjects=10, n_days=8, curve=curve,
                               theta=linear_theta(D=[[0.8, 0.1], [0.1, 0.05]]))
    res = fit(panel, "n", TIGHT, curve)
    y = np.concatenate([s.y for s in panel])
    t = np.concatenate([s.t for s in panel])
    g = np.concatenate([[i] * s.n for i, s in enumerate(panel)])
    X = np.column_stack([np.ones_like(t), t])
    ref = sm.MixedLM(y, X, groups=g, exog_re=X).fit(reml=False, method="lbfgs", gtol=1e-10)
    assert res.converged
    assert abs(res.loglik - ref.llf) < 1e-4
    np.testing.assert_allclose(res.theta.beta, ref.fe_params, atol=1e-3)
    assert res.theta.sigma2 == pytest.approx(ref.scale, rel=1e-3)


def _free(theta: Theta, family: Family) -> np.ndarray:
    x = [theta.beta, [np.log(theta.sigma2), 0.5 * np.log(theta.D[0, 0])]]
    if family.skew:
        x.append(theta.lam)
    if family.mixing == "t":
        x.append([np.log(theta.mixing.nu)])
    return np.concatenate(x)


def _theta(x, family: Family) -> Theta:
    lam = [x[4]] if family.skew else [0.0]
    mixing = MixingLaw("t", float(np.exp(x[-1]))) if family.mixing == "t" else MixingLaw.normal()
    return Theta(x[:2], np.exp(x[2]), [[np.exp(2 * x[3])]], lam, mixing)


@pytest.mark.parametrize("family", ["n", "t", "sn", "st"])
def test_fit_is_stationary_for_derivative_free_search(family):
    fam = Family.from_name(family)
    truth = linear_theta(D=0.8, lam=2.0 if fam.skew else 0.0,
                         mixing=MixingLaw("t", 4.0) if fam.mixing == "t" else None)
    panel, _, curve = linear_panel(5, n_subjects=3, n_days=12, theta=truth)
    res = fit(panel, fam, TIGHT, curve)
    b = res.b_hat

    def neg(x):
        # same parameter space as the fit: |lambda| <= skew_bound
        if fam.skew and abs(x[4]) > TIGHT.skew_bound:
            return np.inf
        try:
            return -approx_loglik(_theta(x, fam), panel, b, curve)
        except (ValueError, ArithmeticError):
            return np.inf

    x0 = _free(res.theta, fam)
    opt = optimize.minimize(neg, x0, method="Nelder-Mead",
                            options={"xatol": 1e-9, "fatol": 1e-11, "maxiter": 20000, "maxfev": 40000})
    assert -opt.fun - res.loglik < 1e-3


def _assert_monotone(res, tol=1e-8):
    for rec in res.trace:
        ll = rec["ll_inner"]
        for a, b in zip(ll, ll[1:]):
            assert b >= a - tol * abs(a)
    logged = {e["iteration"] for e in res.events if e["event"] in ("relinearization_decrease", "extrapolation")}
    for prev, rec in zip(res.trace, res.trace[1:]):
        if rec["ll_lin_start"] < prev["ll_lin_end"] - tol * abs(prev["ll_lin_end"]):
            assert rec["iteration"] in logged or rec["iteration"] - 1 in logged
    assert not [e for e in res.events if e["event"] == "inner_em_decrease"]


@pytest.mark.parametrize("seed", range(20))
def test_inner_em_monotone(seed):
    rng = np.random.default_rng(100 + seed)
    family = ["n", "t", "sn", "st"][seed % 4]
    theta = Theta([2.0 + rng.normal(0, 0.1), -1.0 + rng.normal(0, 0.1), -3.0, 1.2], rng.uniform(0.2, 1.0),
                  np.diag(rng.uniform(0.005, 0.03, 2)), [0.0, 0.0], MixingLaw.normal())
    panel = glc_panel(seed, n_subjects=int(rng.integers(3, 6)), n_days=int(rng.integers(50, 90)), theta=theta)
    res = fit(panel, family, FitConfig(max_iter=25, skew_warmup=5))
    _assert_monotone(res)


def test_normal_family_has_unit_weights():
    panel = glc_panel(7)
    res = fit(panel, "n")
    assert res.converged
    np.testing.assert_array_equal(res.u_hat, np.ones(len(panel)))


def test_fixed_zero_skewness_equals_symmetric_fit():
    panel = glc_panel(8)
    for sym, skew in (("n", "sn"), ("t", "st")):
        a = fit(panel, sym)
        b = fit(panel, skew, FitConfig(fix_skewness=True))
        assert np.all(b.theta.lam == 0.0)
        assert b.loglik == pytest.approx(a.loglik, abs=1e-6)


def test_subject_order_does_not_matter():
    panel = glc_panel(9, n_subjects=5)
    res = fit(panel, "t")
    perm = PreparedPanel(list(reversed(panel.subjects)), panel.k_z, panel.snapshot_date)
    res2 = fit(perm, "t")
    np.testing.assert_allclose(res2.theta.vector(), res.theta.vector(), rtol=0, atol=1e-10)
    assert res2.loglik == pytest.approx(res.loglik, abs=1e-10)


def test_reported_criteria_recompute():
    res = fit(glc_panel(10), "st", FitConfig(max_iter=60))
    ic = info_criteria(res.loglik, res.n_params, res.n_obs)
    assert res.aic == ic["aic"] and res.bic == ic["bic"]
    assert res.n_obs == sum(s.n for s in res.panel)


def test_fit_recovers_gaussian_truth():
    """Gaussian data from a known curve: estimates land near the truth."""
    from conftest import GLC_THETA

    hits = 0
    for seed in range(5):
        res = fit(glc_panel(20 + seed, n_subjects=9, n_days=120), "n")
        hits += np.all(np.abs(res.theta.beta - GLC_THETA.beta) < np.array([0.3, 0.3, 0.1, 0.3]))
    assert hits >= 4


def test_fit_errors():
    with pytest.raises(ModelError, match="empty"):
        fit(PreparedPanel([]), "n")
    short = PreparedPanel([Subject("A", [0.0, 1.0], [1.0, 2.0])])
    with pytest.raises(ModelError, match="observations"):
        fit(short, "n")


def test_fit_serialization_round_trip():
    res = fit(glc_panel(11), "t")
    back = fit_from_dict(fit_to_dict(res))
    np.testing.assert_array_equal(back.theta.vector(), res.theta.vector())
    np.testing.assert_array_equal(back.b_hat, res.b_hat)
    assert back.loglik == res.loglik and back.family == res.family


def test_model_selection_ranks_and_records_failures():
    panel = glc_panel(12)
    rows = model_selection(panel, ["n"])
    assert len(rows) == 1 and rows[0].family == "n"
    rows = model_selection(panel, ["n", "t"])
    assert [r.aic for r in rows] == sorted(r.aic for r in rows)
    short = PreparedPanel([Subject("A", [0.0, 1.0], [1.0, 2.0])])
    rows = model_selection(short, ["n", "t"])
    assert all(r.error for r in rows)
