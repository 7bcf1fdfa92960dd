import numpy as np
import pytest

from fusereg import inference
from fusereg.errors import FitError, InferenceError, LayoutMismatch, SingularBread, TooManyFailures
from fusereg.estimating import EstimatorConfig, EstimatorKind, FitResult, FusionDesign, GSpec, fit_point
from fusereg.formula import design_matrix
from fusereg.inference import (
    StackedSystem,
    bootstrap_covariance,
    fit_from_document,
    fit_with_inference,
    pooled_document,
    read_document,
    result_document,
    rubin_pool,
    sandwich_covariance,
    wald_ci,
    write_document,
    z_value,
)
from fusereg.nuisance import predict_pi
from fusereg.simulation import G_TERMS, IMPUTATION_TERMS, OUTCOME_TERMS, PROPENSITY_TERMS

G = GSpec("y-times-gv", G_TERMS)


def config(kind):
    kind = EstimatorKind(kind)
    return EstimatorConfig(kind, OUTCOME_TERMS, G, PROPENSITY_TERMS if kind.needs_propensity else None,
                           IMPUTATION_TERMS if kind.needs_imputation else None)


def fake_fit(theta, var, names=("a", "b")):
    theta = np.asarray(theta, dtype=float)
    return FitResult(EstimatorKind.DR, theta, list(names), {}, covariance=np.asarray(var, dtype=float), n=100)


@pytest.fixture(scope="module")
def dr_fit(ds2000):
    return fit_point(ds2000, config("DR"))


@pytest.mark.parametrize("kind", ["IPW", "IMP", "DR"])
def test_sandwich_symmetric_psd(ds2000, kind):
    fit, prop, imp = fit_point(ds2000, config(kind))
    sigma, cov = sandwich_covariance(ds2000, fit, prop, imp)
    np.testing.assert_allclose(cov, sigma / ds2000.n)
    assert np.max(np.abs(sigma - sigma.T)) < 1e-10
    assert np.min(np.linalg.eigvalsh(sigma)) >= -1e-10 * np.trace(sigma)


def test_known_nuisance_is_plain_sandwich(ds2000, dr_fit):
    fit, prop, imp = dr_fit
    sigma, _ = sandwich_covariance(ds2000, fit, prop, imp, known_nuisance=True)
    d = FusionDesign.from_dataset(ds2000, fit.outcome, G, prop, imp)
    u = d.moments("DR", fit.theta, eta=prop.eta, alpha=imp.alpha, sigma_l=imp.sigma_l)
    # independent bread: forward differences with a different step
    h = 1e-5
    cols = []
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        up = d.moments("DR", fit.theta + e, eta=prop.eta, alpha=imp.alpha, sigma_l=imp.sigma_l).mean(axis=0)
        cols.append((up - u.mean(axis=0)) / h)
    bread = np.linalg.inv(np.column_stack(cols))
    oracle = bread @ (u.T @ u / ds2000.n) @ bread.T
    np.testing.assert_allclose(sigma, oracle, rtol=1e-5)


@pytest.mark.parametrize("kind", ["IPW", "IMP", "DR"])
def test_nuisance_correction_changes_sandwich(ds2000, kind):
    fit, prop, imp = fit_point(ds2000, config(kind))
    full, _ = sandwich_covariance(ds2000, fit, prop, imp)
    known, _ = sandwich_covariance(ds2000, fit, prop, imp, known_nuisance=True)
    assert np.max(np.abs(full - known)) > 1e-6 * np.max(np.abs(known))


def test_stacked_m_block_matches_logistic_hessian(ds2000, dr_fit):
    fit, prop, imp = dr_fit
    d = FusionDesign.from_dataset(ds2000, fit.outcome, G, prop, imp)
    _, s, _, g_phi, m = StackedSystem(d, "DR", prop, imp).blocks(fit.theta)
    w = design_matrix(PROPENSITY_TERMS, ds2000.columns(), ds2000.n)
    p = predict_pi(prop, ds2000)
    hess = -(w * (p * (1 - p))[:, None]).T @ w / ds2000.n
    np.testing.assert_allclose(m[:3, :3], hess, rtol=1e-5)
    # the covariate block for alpha is -z^T z / (n sigma) over source B
    z = design_matrix(IMPUTATION_TERMS, ds2000.columns(), ds2000.n)
    zb = z * (1 - ds2000.r)[:, None]
    np.testing.assert_allclose(m[3:7, 3:7], -zb.T @ zb / ds2000.n / imp.sigma_l[0, 0], rtol=1e-5)
    # propensity and covariate scores do not interact
    np.testing.assert_allclose(m[:3, 3:], 0.0, atol=1e-8)
    # scores average to zero at the fitted values
    assert np.max(np.abs(s.mean(axis=0))) < 1e-8


def test_bootstrap_matches_sandwich(ds2000):
    fit, prop, imp = fit_point(ds2000, config("DR"))
    _, cov = sandwich_covariance(ds2000, fit, prop, imp)
    boot = bootstrap_covariance(ds2000, config("DR"), 500, seed=3)
    ratio = np.sqrt(np.diag(boot.covariance) / np.diag(cov))
    assert np.all(np.abs(ratio - 1) < 0.15), ratio
    assert boot.failures == 0 and boot.estimates.shape == (500, 4)


def test_bootstrap_guard_and_determinism(ds500):
    with pytest.raises(ValueError):
        bootstrap_covariance(ds500, config("IMP"), 2, 0)
    a = bootstrap_covariance(ds500, config("IMP"), 50, 7)
    b = bootstrap_covariance(ds500, config("IMP"), 50, 7)
    np.testing.assert_array_equal(a.estimates, b.estimates)


def test_bootstrap_too_many_failures(ds500, monkeypatch):
    real = inference.fit_point
    calls = {"n": 0}

    def flaky(ds, cfg, init=None):
        calls["n"] += 1
        if calls["n"] % 5 == 0:
            raise FitError("synthetic failure")
        return real(ds, cfg, init)

    monkeypatch.setattr(inference, "fit_point", flaky)
    with pytest.raises(TooManyFailures):
        bootstrap_covariance(ds500, config("IMP"), 50, 0)


def test_wald_arithmetic():
    assert z_value(0.95) == pytest.approx(1.959964, abs=1e-6)
    fit = fake_fit([1.0, 2.0], np.diag([0.04, 0.0]))
    (lo, hi, lev), (lo2, hi2, _) = wald_ci(fit)
    assert (lo, hi, lev) == pytest.approx((1 - 1.959964 * 0.2, 1 + 1.959964 * 0.2, 0.95), abs=1e-6)
    assert lo2 == hi2 == 2.0
    with pytest.raises(InferenceError):
        wald_ci(FitResult(EstimatorKind.DR, np.zeros(1), ["a"], {}))


def test_fit_with_inference_intervals(ds500):
    fit, _, _ = fit_with_inference(ds500, config("DR"), level=0.9)
    for (lo, hi, lev), t in zip(fit.wald_intervals, fit.theta):
        assert lo <= t <= hi and lev == 0.9


def test_rubin_hand_example():
    pooled = rubin_pool([fake_fit([1.0], [[0.04]], ["a"]), fake_fit([1.2], [[0.04]], ["a"])])
    assert pooled.estimate[0] == pytest.approx(1.1)
    assert pooled.between[0, 0] == pytest.approx(0.02)
    assert pooled.total[0, 0] == pytest.approx(0.07)
    assert pooled.m == 2


def test_rubin_identical_and_single():
    f = fake_fit([0.3, -1.0], [[0.01, 0.002], [0.002, 0.03]])
    same = rubin_pool([f, f, f])
    np.testing.assert_allclose(same.estimate, f.theta)
    np.testing.assert_allclose(same.between, 0.0)
    np.testing.assert_allclose(same.total, f.covariance)
    one = rubin_pool([f])
    np.testing.assert_allclose(one.total, one.within)
    assert one.m == 1


def test_rubin_total_at_least_within():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.integers(2, 8)
        fits = [fake_fit(rng.normal(size=2), np.diag(rng.uniform(0.01, 1, 2))) for _ in range(m)]
        p = rubin_pool(fits)
        np.testing.assert_allclose(p.total, p.within + (1 + 1 / m) * p.between)
        assert np.all(np.diag(p.total) >= np.diag(p.within))


def test_rubin_layout_mismatch():
    with pytest.raises(LayoutMismatch):
        rubin_pool([fake_fit([1.0, 2.0], np.eye(2)), fake_fit([1.0, 2.0], np.eye(2), names=("a", "c"))])
    with pytest.raises(LayoutMismatch):
        rubin_pool([])


def test_singular_bread():
    with pytest.raises(SingularBread):
        inference._inv(np.array([[1.0, 1.0], [1.0, 1.0]]), "test")


def test_result_document_round_trip(ds500, tmp_path):
    fit, _, _ = fit_with_inference(ds500, config("DR"))
    doc = result_document(fit)
    assert list(doc) == ["schema_version", "kind", "estimator", "n", "level", "coefficients", "covariance",
                         "diagnostics"]
    assert list(doc["coefficients"][0]) == ["name", "estimate", "std_error", "ci_lo", "ci_hi"]
    path = tmp_path / "r.json"
    write_document(doc, path)
    back = fit_from_document(read_document(path))
    np.testing.assert_array_equal(back.theta, fit.theta)
    np.testing.assert_array_equal(back.covariance, fit.covariance)
    pooled = pooled_document(rubin_pool([back, back]))
    assert pooled["m"] == 2 and pooled["kind"] == "pooled"
    with pytest.raises(LayoutMismatch):
        fit_from_document({"coefficients": [{"name": "a"}]})
