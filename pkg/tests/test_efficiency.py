import numpy as np
import pytest

from fusereg.data import Record
from fusereg.efficiency import (
    POLYNOMIAL,
    TRIGONOMETRIC,
    BasisSpec,
    DiscreteCovariateLaw,
    EfficientWeights,
    build_basis,
    efficient_fit,
    efficient_weights,
    h_opt_binary,
    k_operator,
    tau_opt,
)
from fusereg.errors import DegenerateVariance, FitError, IllConditionedGram
from fusereg.estimating import EstimatorConfig, FusionDesign, GSpec, fit_point, nuisance_args, u_dr
from fusereg.formula import design_matrix
from fusereg.inference import sandwich_covariance
from fusereg.nuisance import LINEAR, LOGISTIC, ImputationFit, OutcomeModel, PropensityFit, estimate_sigma_y
from helpers import TOY_LAW, TOY_OUTCOME, TOY_PROP, brute_force_h

from fusereg.simulation import (
    G_TERMS,
    IMPUTATION_TERMS,
    OUTCOME_TERMS,
    PROPENSITY_TERMS,
    DgpParams,
    generate_dataset,
)

CFG = EstimatorConfig("DR", OUTCOME_TERMS, GSpec("y-times-gv", G_TERMS), PROPENSITY_TERMS, IMPUTATION_TERMS)


@pytest.fixture(scope="module")
def fitted(ds2000):
    fit0, prop, imp = fit_point(ds2000, CFG)
    sigma_y = estimate_sigma_y(fit0.outcome, imp, ds2000)
    outcome = OutcomeModel(LINEAR, OUTCOME_TERMS, fit0.theta, sigma_y)
    return outcome, prop, imp


# -- basis ----------------------------------------------------------------------

def test_degree_one_basis_is_y_times_design(ds2000):
    spec = BasisSpec.from_data(ds2000, K=4)
    assert spec.labels() == ["Y", "Y*A", "Y*C", "Y^2"]
    spec3 = BasisSpec.from_data(ds2000, K=3)
    assert spec3.labels() == ["Y", "Y*A", "Y*C"]


def test_basis_values(ds2000):
    spec = BasisSpec.from_data(ds2000, K=4)
    row = {"Y": 1.0, "A": 0.5, "C": -0.25}
    y, a = spec.standardize(1.0, 0), spec.standardize(0.5, 1)
    c = spec.standardize(-0.25, 2)
    np.testing.assert_allclose(build_basis(spec, row), [y, y * a, y * c, y * y])
    rec = Record(1, 1.0, None, {"A": 0.5, "C": -0.25})
    np.testing.assert_array_equal(build_basis(spec, rec), build_basis(spec, row))
    with pytest.raises(ValueError):
        build_basis(spec, Record(0, None, (1.0,), {"A": 0.5, "C": -0.25}))


def test_trig_standardization_hits_pi(ds2000):
    spec = BasisSpec.from_data(ds2000, TRIGONOMETRIC, K=6)
    assert spec.standardize(ds2000.y.min(), 0) == pytest.approx(-np.pi, abs=1e-12)
    assert spec.standardize(ds2000.y.max(), 0) == pytest.approx(np.pi, abs=1e-12)
    a = ds2000.columns()["A"]
    assert spec.standardize(a.min(), 1) == pytest.approx(-np.pi, abs=1e-12)
    assert spec.standardize(a.max(), 1) == pytest.approx(np.pi, abs=1e-12)
    assert spec.labels()[:2] == ["sin(Y)", "cos(Y)"]


@pytest.mark.parametrize("family", [POLYNOMIAL, TRIGONOMETRIC])
def test_gram_full_rank_k8(ds2000, family):
    spec = BasisSpec.from_data(ds2000, family, K=8)
    x = spec.matrix(ds2000.y, {k: v[ds2000.in_a] for k, v in ds2000.columns().items()})
    s = np.linalg.svd(x, compute_uv=False)
    assert np.sum(s > 1e-10 * s[0]) == 8


def test_basis_nested(ds2000):
    small = BasisSpec.from_data(ds2000, K=5).labels()
    big = BasisSpec.from_data(ds2000, K=12).labels()
    assert big[:5] == small
    assert len(set(big)) == 12


def test_basis_spec_validation():
    with pytest.raises(ValueError):
        BasisSpec("wavelet", 4, ("A",), (0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        BasisSpec(POLYNOMIAL, 4, ("A",), (0.0,), (1.0,))


# -- K operator -------------------------------------------------------------------

def test_k_of_y_times_g_is_u_dr(ds500):
    fit0, prop, imp = fit_point(ds500, CFG)
    outcome = OutcomeModel(LINEAR, OUTCOME_TERMS, fit0.theta, 0.4)

    def basis(y, cols):
        return y[:, None] * design_matrix(G_TERMS, cols, y.size)

    g = GSpec("custom-basis", basis=basis, n_basis=4)
    theta = fit0.theta + 0.1
    for i in (0, 1, 2, 3, 250):
        row = ds500.row(i)
        np.testing.assert_allclose(k_operator(g, theta, prop, imp, row, outcome),
                                   u_dr(theta, prop, imp, row, CFG.g, outcome), rtol=1e-10, atol=1e-12)


def test_k_is_linear(ds500, fitted):
    outcome, prop, imp = fitted
    spec = BasisSpec.from_data(ds500, K=6)
    k = k_operator(spec, outcome.beta, prop, imp, ds500, outcome)
    a, b = 0.7, -2.3
    combo = GSpec("custom-basis", basis=lambda y, c: spec.matrix(y, c) @ np.eye(6)[[1, 4]].T, n_basis=2,
                  tau=np.array([[a, b]]))
    k_combo = k_operator(combo, outcome.beta, prop, imp, ds500, outcome)[:, 0]
    np.testing.assert_allclose(k_combo, a * k[:, 1] + b * k[:, 4], rtol=1e-12, atol=1e-12)


def test_k_annihilates_functions_of_v(ds500, fitted):
    outcome, prop, imp = fitted
    g = GSpec("custom-basis", basis=lambda y, c: np.column_stack([np.ones_like(y), c["A"] ** 2]), n_basis=2)
    np.testing.assert_allclose(k_operator(g, outcome.beta, prop, imp, ds500, outcome), 0.0, atol=1e-12)


def test_k_mean_zero_at_truth(params):
    """K of a nonlinear basis function has mean zero at the true parameters."""
    ds = generate_dataset(params, 100_000, 99)
    prop = PropensityFit(PROPENSITY_TERMS, np.array(params.eta_gen), 0.0, True, 0)
    imp = ImputationFit(IMPUTATION_TERMS, np.array(params.alpha_gen[:4])[:, None],
                        np.array([[params.alpha_gen[4] ** 2]]))
    outcome = OutcomeModel(LINEAR, OUTCOME_TERMS, params.beta_true, params.beta_gen[4])
    spec = BasisSpec.from_data(ds, K=8)
    k = k_operator(spec, params.beta_true, prop, imp, ds, outcome)
    z = k.mean(axis=0) / (k.std(axis=0, ddof=1) / np.sqrt(ds.n))
    assert np.all(np.abs(z) < 4), z


# -- tau and Omega ------------------------------------------------------------------

def test_tau_with_y_times_design_reproduces_dr(ds2000, fitted):
    outcome, prop, imp = fitted

    def basis(y, cols):
        return y[:, None] * design_matrix(G_TERMS, cols, y.size)

    tr = tau_opt(ds2000, GSpec("custom-basis", basis=basis, n_basis=4), outcome.beta, prop, imp, outcome)
    from fusereg.estimating import solve

    g = GSpec("custom-basis", basis=basis, n_basis=4, tau=tr.tau)
    fit = solve(ds2000, "DR", g, outcome, prop, imp)
    base = solve(ds2000, "DR", CFG.g, outcome, prop, imp)
    np.testing.assert_allclose(fit.theta, base.theta, atol=1e-8)


def test_omega_nested_monotone(ds2000, fitted):
    outcome, prop, imp = fitted
    prev = None
    for k in (4, 6, 8, 12):
        tr = tau_opt(ds2000, BasisSpec.from_data(ds2000, K=k), outcome.beta, prop, imp, outcome)
        np.testing.assert_allclose(tr.omega, tr.omega.T, atol=1e-12)
        assert np.min(np.linalg.eigvalsh(tr.omega)) > 0
        if prev is not None:
            assert np.min(np.linalg.eigvalsh(tr.omega - prev)) > -1e-6 * np.max(np.abs(prev))
        prev = tr.omega


def test_omega_tracks_sandwich(ds2000):
    fit, prop, imp = efficient_fit(ds2000, CFG)
    w, _ = efficient_weights(ds2000, CFG)
    sigma, _ = sandwich_covariance(ds2000, fit, prop, imp)
    inv_omega = np.linalg.inv(w.tau.omega)
    ratio = np.diag(inv_omega) / np.diag(sigma)
    # both sides are single-sample estimates, so only rough agreement is expected
    assert np.all(np.abs(ratio - 1) < 0.25), ratio


def test_efficient_fit_beats_default(ds2000):
    fit, prop, imp = efficient_fit(ds2000, CFG)
    base, _, _ = fit_point(ds2000, CFG)
    se_eff = np.diag(sandwich_covariance(ds2000, fit, prop, imp)[0])
    se_base = np.diag(sandwich_covariance(ds2000, base, prop, imp)[0])
    assert se_eff[3] < se_base[3]
    assert fit.diagnostics["efficient"]["K"] == 8


def test_ill_conditioned_gram(ds500, fitted):
    outcome, prop, imp = fitted
    dup = GSpec("custom-basis", basis=lambda y, c: np.column_stack([y, y, y * c["A"], y * c["C"], y ** 2]),
                n_basis=5)
    with pytest.raises(IllConditionedGram):
        tau_opt(ds500, dup, outcome.beta, prop, imp, outcome)
    few = GSpec("custom-basis", basis=lambda y, c: np.column_stack([y, np.ones_like(y)]), n_basis=2)
    with pytest.raises(IllConditionedGram):
        tau_opt(ds500, few, outcome.beta, prop, imp, outcome)


# -- optimal h for binary outcomes -------------------------------------------------------

@pytest.mark.parametrize("v", [0.0, 1.0])
def test_h_opt_exact_matches_enumeration(v):
    got = h_opt_binary({"V": v}, TOY_OUTCOME, TOY_PROP, TOY_LAW, mode="exact")
    np.testing.assert_allclose(got, brute_force_h(v), rtol=1e-13, atol=1e-15)


def test_h_opt_modes_agree():
    cols = {"V": np.array([0.0, 1.0])}
    exact = h_opt_binary(cols, TOY_OUTCOME, TOY_PROP, TOY_LAW, mode="exact")
    quad = h_opt_binary(cols, TOY_OUTCOME, TOY_PROP, TOY_LAW, mode="quadrature")
    np.testing.assert_allclose(quad, exact, rtol=1e-12, atol=1e-14)
    mc = h_opt_binary(cols, TOY_OUTCOME, TOY_PROP, TOY_LAW, mc_draws=100_000, seed=1)
    np.testing.assert_allclose(mc, exact, atol=0.01)


def test_h_opt_mc_deterministic_and_close_to_quadrature():
    imp = ImputationFit(("1", "V"), np.array([[0.1], [0.5]]), np.array([[0.8]]))
    cols = {"V": np.linspace(-1, 1, 4)}
    a = h_opt_binary(cols, TOY_OUTCOME, TOY_PROP, imp, seed=5)
    b = h_opt_binary(cols, TOY_OUTCOME, TOY_PROP, imp, seed=5)
    np.testing.assert_array_equal(a, b)
    quad = h_opt_binary(cols, TOY_OUTCOME, TOY_PROP, imp, mode="quadrature")
    big = h_opt_binary(cols, TOY_OUTCOME, TOY_PROP, imp, mc_draws=200_000, seed=2)
    np.testing.assert_allclose(big, quad, atol=0.01)


def test_h_opt_constant_when_v_free():
    """Outcome, law and weights free of V make h constant across V."""
    outcome = OutcomeModel(LOGISTIC, ("1",), np.array([0.4, 0.9]))
    prop = PropensityFit(("1",), np.array([0.3]), 0.0, True, 0)
    law = DiscreteCovariateLaw(np.array([[0.0], [1.0], [2.0]]),
                               lambda c: np.tile([0.2, 0.5, 0.3], (len(c["V"]), 1)))
    h = h_opt_binary({"V": np.linspace(-3, 3, 10)}, outcome, prop, law, mode="exact")
    np.testing.assert_allclose(h, np.tile(h[0], (10, 1)), rtol=1e-14)


def test_h_opt_errors():
    with pytest.raises(FitError):
        h_opt_binary({"V": 0.0}, OutcomeModel(LINEAR, ("1", "V"), np.zeros(3)), TOY_PROP, TOY_LAW)
    imp = ImputationFit(("1", "V"), np.array([[0.1], [0.5]]), np.array([[0.8]]))
    with pytest.raises(ValueError):
        h_opt_binary({"V": 0.0}, TOY_OUTCOME, TOY_PROP, imp, mode="exact")
    with pytest.raises(ValueError):
        h_opt_binary({"V": 0.0}, TOY_OUTCOME, TOY_PROP, TOY_LAW, mode="magic")
    certain = OutcomeModel(LOGISTIC, ("1", "V"), np.array([-60.0, 0.0, 0.0]))
    with pytest.raises(DegenerateVariance):
        h_opt_binary({"V": 0.0}, certain, TOY_PROP, TOY_LAW, mode="exact")


@pytest.mark.filterwarnings("ignore::fusereg.estimating.WeakIdentificationWarning")
def test_h_weighted_fit_binary():
    ds = generate_dataset(DgpParams(family=LOGISTIC), 2000, 4)
    cfg = EstimatorConfig("DR", OUTCOME_TERMS, GSpec("y-times-gv", G_TERMS), PROPENSITY_TERMS, IMPUTATION_TERMS,
                          family=LOGISTIC)
    w, (fit0, prop, imp) = efficient_weights(ds, cfg)
    assert isinstance(w, EfficientWeights) and w.family == LOGISTIC
    h = w.h(ds.columns())
    assert h.shape == (2000, 4) and np.all(np.isfinite(h))
    fit, _, _ = efficient_fit(ds, cfg)
    assert np.all(np.abs(fit.theta - fit0.theta) < 0.5)
