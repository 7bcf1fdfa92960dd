"""Estimating functions for fused-data regression and their solver.

For a choice of index function ``g(Y, V)`` three estimating functions are
available. With ``w1 = 1/pi(V)`` and ``w0 = 1/(1 - pi(V))``:

IPW  ``R w1 g - (1-R) w0 E[g | V, L]``
DR   ``R w1 {g - E[g | V]} + (1-R) w0 {E[g | V] - E[g | V, L]}``
IMP  the DR form with ``w1 = w0 = 1``

Conditional expectations are taken under the outcome model (given V, L) and
additionally under the covariate model (given V alone).
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels
from .data import FusedDataset, Record
from .errors import DimensionMismatch, FitError, NoConvergence, SingularJacobian
from .formula import design_matrix
from .nuisance import (
    GH_NODES,
    LINEAR,
    LOGISTIC,
    PI_CLAMP,
    ImputationFit,
    OutcomeModel,
    PropensityFit,
    cond_mean_v,
    cond_mean_vl,
    normal_rule,
)

COND_LIMIT = 1e10


class EstimatorKind(str, enum.Enum):
    IPW = "IPW"
    IMP = "IMP"
    DR = "DR"

    @property
    def needs_propensity(self) -> bool:
        return self in (EstimatorKind.IPW, EstimatorKind.DR)

    @property
    def needs_imputation(self) -> bool:
        return self in (EstimatorKind.IMP, EstimatorKind.DR)


class WeakIdentificationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GSpec:
    """Index function ``g(Y, V)``.

    ``kind="y-times-gv"`` gives ``Y * g(V)``, with ``g(V)`` built from V
    ``terms`` or computed by ``g_fn(columns) -> (n, n_basis)``.
    ``kind="custom-basis"`` gives ``tau @ basis(Y, V)`` where
    ``basis(y, columns)`` returns an ``(n, n_basis)`` array; ``tau``
    defaults to the identity.
    """

    kind: str = "y-times-gv"
    terms: tuple[str, ...] = ()
    basis: Callable[[np.ndarray, Mapping[str, np.ndarray]], np.ndarray] | None = None
    tau: np.ndarray | None = None
    n_basis: int | None = None
    g_fn: Callable[[Mapping[str, np.ndarray]], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.kind == "y-times-gv":
            if not self.terms and (self.g_fn is None or self.n_basis is None):
                raise ValueError("y-times-gv needs terms, or g_fn with n_basis")
        elif self.kind == "custom-basis":
            if self.basis is None or self.n_basis is None:
                raise ValueError("custom-basis needs a basis callable and n_basis")
        else:
            raise ValueError(f"unknown g kind {self.kind!r}")

    @property
    def dim(self) -> int:
        if self.kind == "y-times-gv":
            return len(self.terms) if self.terms else self.n_basis
        return self.n_basis if self.tau is None else self.tau.shape[0]

    def g_of_v(self, columns: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        if self.terms:
            return design_matrix(self.terms, columns, n)
        return np.asarray(self.g_fn(columns), dtype=float).reshape(n, self.n_basis)


@dataclass
class FitResult:
    estimator: EstimatorKind
    theta: np.ndarray
    names: list[str]
    solver: dict
    covariance: np.ndarray | None = None  # per-sample, Sigma / n
    asymptotic_covariance: np.ndarray | None = None  # Sigma
    wald_intervals: list[tuple[float, float, float]] | None = None
    n: int = 0
    diagnostics: dict = field(default_factory=dict)
    outcome: OutcomeModel | None = None
    g: GSpec | None = None

    @property
    def std_errors(self) -> np.ndarray:
        if self.covariance is None:
            raise ValueError("no covariance estimate attached")
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


class FusionDesign:
    """Per-row arrays needed to evaluate estimating functions.

    Holds the outcome design ``x``, covariates ``l`` (zero on source-A rows),
    outcomes ``y`` (zero on source-B rows), the propensity design ``w``, the
    covariate-model design ``z``, and ``g(V)`` or the V columns for custom
    bases. Parameters are supplied at evaluation time.
    """

    def __init__(
        self,
        columns: Mapping[str, np.ndarray],
        r: np.ndarray,
        y: np.ndarray,
        l: np.ndarray,
        outcome: OutcomeModel,
        g: GSpec,
        propensity_terms: Sequence[str] | None = None,
        imputation_terms: Sequence[str] | None = None,
        nodes: int = GH_NODES,
    ):
        self.r = np.asarray(r, dtype=float)
        n = self.r.size
        self.n = n
        self.columns = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
        self.y = np.asarray(y, dtype=float).reshape(n)
        self.l = np.asarray(l, dtype=float).reshape(n, -1)
        self.family = outcome.family
        self.outcome = outcome
        self.x = design_matrix(outcome.terms, self.columns, n)
        if self.x.shape[1] + self.l.shape[1] != outcome.beta.size:
            raise DimensionMismatch("outcome coefficients do not match (V terms, L) dimensions")
        self.g = g
        self.gv = g.g_of_v(self.columns, n) if g.kind == "y-times-gv" else None
        self.w = None if propensity_terms is None else design_matrix(propensity_terms, self.columns, n)
        self.z = None if imputation_terms is None else design_matrix(imputation_terms, self.columns, n)
        self.nodes = nodes

    @classmethod
    def from_dataset(cls, ds: FusedDataset, outcome, g, prop=None, imp=None, **kw) -> "FusionDesign":
        return cls(
            ds.columns(), ds.r, ds.y_full(), ds.l_full(), outcome, g,
            None if prop is None else _terms(prop),
            None if imp is None else _terms(imp),
            **kw,
        )

    @classmethod
    def from_record(cls, row: Record, outcome, g, prop=None, imp=None, **kw) -> "FusionDesign":
        p = outcome.beta.size - len(outcome.terms)
        cols = {k: np.array([v]) for k, v in row.v.items()}
        l = np.zeros((1, p)) if row.l is None else np.asarray(row.l, dtype=float).reshape(1, p)
        y = np.array([0.0 if row.y is None else row.y])
        return cls(cols, np.array([float(row.r)]), y, l, outcome, g,
                   None if prop is None else _terms(prop), None if imp is None else _terms(imp), **kw)

    @property
    def dim_theta(self) -> int:
        return self.outcome.beta.size

    # -- pieces ---------------------------------------------------------------

    def weights(self, eta) -> tuple[np.ndarray, np.ndarray]:
        pi = np.clip(kernels.expit(self.w @ np.asarray(eta, dtype=float)), PI_CLAMP, 1.0 - PI_CLAMP)
        return 1.0 / pi, 1.0 / (1.0 - pi)

    def mu(self, beta) -> np.ndarray:
        return cond_mean_vl(self.family, beta, self.x, self.l)

    def m(self, beta, alpha, sigma_l) -> np.ndarray:
        return cond_mean_v(self.family, beta, self.x, self.z @ alpha, sigma_l, self.nodes)

    def _y_params(self, beta, alpha, sigma_l, sigma_y):
        """Location/scale of Y | V,L and Y | V (linear family) or probabilities (logistic)."""
        if self.family == LOGISTIC:
            p_vl = self.mu(beta)
            p_v = None if alpha is None else self.m(beta, alpha, sigma_l)
            return p_vl, p_v
        if sigma_y is None:
            raise FitError("custom-basis moments in the linear family need sigma_y on the outcome model")
        k = self.x.shape[1]
        beta = np.asarray(beta, dtype=float)
        mu = self.mu(beta)
        sd_vl = np.full(self.n, sigma_y)
        if alpha is None:
            return (mu, sd_vl), None
        m = self.m(beta, alpha, sigma_l)
        bl = beta[k:]
        sd_v = np.full(self.n, np.sqrt(sigma_y ** 2 + float(bl @ np.asarray(sigma_l) @ bl)))
        return (mu, sd_vl), (m, sd_v)

    def _expect_basis(self, params) -> np.ndarray:
        basis = self.g.basis
        if self.family == LOGISTIC:
            p = params
            return p[:, None] * basis(np.ones(self.n), self.columns) + (1 - p)[:, None] * basis(
                np.zeros(self.n), self.columns
            )
        loc, sd = params
        z, w = normal_rule(self.nodes)
        out = 0.0
        for zk, wk in zip(z, w):
            out = out + wk * basis(loc + sd * zk, self.columns)
        return out

    def basis_terms(self, beta, alpha=None, sigma_l=None, sigma_y=None):
        """``(psi, E[psi | V], E[psi | V, L])`` for the custom basis."""
        psi = self.g.basis(self.y, self.columns)
        p_vl, p_v = self._y_params(beta, alpha, sigma_l, sigma_y)
        e_vl = self._expect_basis(p_vl)
        e_v = None if p_v is None else self._expect_basis(p_v)
        return psi, e_v, e_vl

    # -- moments --------------------------------------------------------------

    def moments(self, kind, beta, eta=None, alpha=None, sigma_l=None, sigma_y=None) -> np.ndarray:
        """Per-row estimating function values, shape ``(n, dim g)``."""
        kind = EstimatorKind(kind)
        if kind.needs_propensity:
            if eta is None or self.w is None:
                raise FitError(f"{kind.value} needs a data-source model")
            w1, w0 = self.weights(eta)
        else:
            w1 = w0 = np.ones(self.n)
        if kind.needs_imputation and (alpha is None or self.z is None):
            raise FitError(f"{kind.value} needs a covariate model")
        if sigma_y is None:
            sigma_y = self.outcome.sigma_y
        if self.g.kind == "y-times-gv":
            mu = self.mu(beta)
            if kind is EstimatorKind.IPW:
                f = kernels.ipw_factor(self.r, w1, w0, self.y, mu)
            else:
                m = self.m(beta, alpha, sigma_l)
                f = kernels.dr_factor(self.r, w1, w0, self.y, m, mu)
            return self.gv * f[:, None]
        if kind is EstimatorKind.IPW:
            psi, _, e_vl = self.basis_terms(beta, None, None, sigma_y)
            u = self.r[:, None] * w1[:, None] * psi - ((1 - self.r) * w0)[:, None] * e_vl
        else:
            psi, e_v, e_vl = self.basis_terms(beta, alpha, sigma_l, sigma_y)
            u = kernels.k_rows(self.r, w1, w0, psi, e_v, e_vl)
        return u if self.g.tau is None else u @ np.asarray(self.g.tau).T


def _terms(fit_or_terms) -> tuple[str, ...]:
    if isinstance(fit_or_terms, (PropensityFit, ImputationFit)):
        return fit_or_terms.terms
    return tuple(fit_or_terms)


def nuisance_args(prop: PropensityFit | None, imp: ImputationFit | None) -> dict:
    return {
        "eta": None if prop is None else prop.eta,
        "alpha": None if imp is None else imp.alpha,
        "sigma_l": None if imp is None else imp.sigma_l,
    }


# -- row-level API -------------------------------------------------------------

def u_ipw(theta, prop: PropensityFit, row: Record, g: GSpec, outcome: OutcomeModel) -> np.ndarray:
    """IPW estimating function for a single record at ``theta``."""
    d = FusionDesign.from_record(row, outcome.with_beta(theta), g, prop=prop)
    return d.moments(EstimatorKind.IPW, theta, eta=prop.eta)[0]


def u_dr(theta, prop: PropensityFit, imp: ImputationFit, row: Record, g: GSpec, outcome: OutcomeModel) -> np.ndarray:
    d = FusionDesign.from_record(row, outcome.with_beta(theta), g, prop=prop, imp=imp)
    return d.moments(EstimatorKind.DR, theta, **nuisance_args(prop, imp))[0]


def u_imp(theta, imp: ImputationFit, row: Record, g: GSpec, outcome: OutcomeModel) -> np.ndarray:
    d = FusionDesign.from_record(row, outcome.with_beta(theta), g, imp=imp)
    return d.moments(EstimatorKind.IMP, theta, **nuisance_args(None, imp))[0]


# -- numerical differentiation -------------------------------------------------

def fd_steps(x) -> np.ndarray:
    return 1e-6 * (1.0 + np.abs(np.asarray(x, dtype=float)))


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x) -> np.ndarray:
    """Central-difference Jacobian with step ``1e-6 (1 + |x_j|)``."""
    x = np.asarray(x, dtype=float)
    h = fd_steps(x)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h[j]))
    return np.column_stack(cols) if cols else np.zeros((np.size(f(x)), 0))


# -- solver --------------------------------------------------------------------

def initial_theta(ds: FusedDataset, outcome: OutcomeModel, imp: ImputationFit | None) -> np.ndarray:
    """Regression of Y on (x(V), imputed L) over source A; zeros without a covariate model."""
    if imp is None:
        return np.zeros(outcome.beta.size)
    cols = {k: v[ds.in_a] for k, v in ds.columns().items()}
    x = np.hstack([design_matrix(outcome.terms, cols, ds.n_a), design_matrix(imp.terms, cols, ds.n_a) @ imp.alpha])
    if np.linalg.matrix_rank(x) < x.shape[1]:
        return np.zeros(outcome.beta.size)
    if outcome.family == LINEAR:
        return np.linalg.lstsq(x, ds.y, rcond=None)[0]
    beta = np.zeros(x.shape[1])
    for _ in range(25):
        ll, grad, hess = kernels.logistic_loglik_grad_hess(x, ds.y, beta)
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            return np.zeros(outcome.beta.size)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-8 or np.max(np.abs(beta)) > 30:
            break
    return beta if np.all(np.isfinite(beta)) and np.max(np.abs(beta)) <= 30 else np.zeros(outcome.beta.size)


def _check_jacobian(jac: np.ndarray, weak_threshold: float, diag: dict) -> None:
    s = np.linalg.svd(jac, compute_uv=False)
    cond = np.inf if s[-1] == 0 else s[0] / s[-1]
    diag["jacobian_condition"] = float(cond)
    diag["jacobian_min_singular"] = float(s[-1])
    if cond > COND_LIMIT:
        raise SingularJacobian(f"estimating-equation Jacobian is singular (condition {cond:.3g})")
    diag["weak_identification"] = bool(s[-1] < weak_threshold)
    if s[-1] < weak_threshold:
        warnings.warn(
            f"smallest singular value of the estimating-equation Jacobian is {s[-1]:.3g}",
            WeakIdentificationWarning,
            stacklevel=3,
        )


def _newton(mean_u, theta, tol, max_iter, weak_threshold, diag):
    u = mean_u(theta)
    norm = np.linalg.norm(u)
    jac = numeric_jacobian(mean_u, theta)
    _check_jacobian(jac, weak_threshold, diag)
    it = 0
    while np.max(np.abs(u)) >= tol and it < max_iter:
        if it > 0:
            jac = numeric_jacobian(mean_u, theta)
        it += 1
        try:
            step = np.linalg.solve(jac, -u)
        except np.linalg.LinAlgError:
            raise SingularJacobian("estimating-equation Jacobian is singular") from None
        t = 1.0
        while True:
            cand = theta + t * step
            u_c = mean_u(cand)
            n_c = np.linalg.norm(u_c)
            if np.all(np.isfinite(u_c)) and (n_c < norm or t < 1e-8):
                break
            t *= 0.5
        theta, u, norm = cand, u_c, n_c
    diag.update(iterations=it, residual_norm=float(np.max(np.abs(u))))
    if np.max(np.abs(u)) >= tol:
        raise NoConvergence(
            f"estimating equations not solved after {it} iterations (max |mean U| = {np.max(np.abs(u)):.3g})",
            best=theta,
        )
    return theta


def _gauss_newton(mean_u, theta, weight, tol, max_iter):
    def q(t):
        u = mean_u(t)
        return float(u @ weight @ u), u

    val, u = q(theta)
    it = 0
    for it in range(1, max_iter + 1):
        jac = numeric_jacobian(mean_u, theta)
        a = jac.T @ weight @ jac
        grad = jac.T @ weight @ u
        try:
            step = -np.linalg.solve(a, grad)
        except np.linalg.LinAlgError:
            raise SingularJacobian("GMM normal matrix is singular") from None
        t = 1.0
        while True:
            cand = theta + t * step
            val_c, u_c = q(cand)
            if val_c <= val or t < 1e-10:
                break
            t *= 0.5
        done = np.max(np.abs(cand - theta)) < tol * (1 + np.max(np.abs(theta)))
        theta, val, u = cand, val_c, u_c
        if done:
            break
    else:
        raise NoConvergence("GMM iterations did not converge", best=theta)
    return theta, it, val


def solve(
    ds: FusedDataset,
    kind,
    g: GSpec,
    outcome: OutcomeModel,
    prop: PropensityFit | None = None,
    imp: ImputationFit | None = None,
    init=None,
    *,
    tol: float = 1e-9,
    max_iter: int = 200,
    weak_threshold: float = 1e-3,
    design: FusionDesign | None = None,
) -> FitResult:
    """Solve the empirical estimating equations for the outcome coefficients.

    Just-identified systems (``dim g == dim beta``) are rooted by Newton's
    method with a central-difference Jacobian and backtracking on the
    residual norm. Over-identified systems use two-step GMM: identity
    weight first, then the inverse covariance of the moments at the
    first-step estimate.
    """
    kind = EstimatorKind(kind)
    if kind.needs_propensity and prop is None:
        raise FitError(f"{kind.value} requires a fitted data-source model")
    if kind.needs_imputation and imp is None:
        raise FitError(f"{kind.value} requires a fitted covariate model")
    k = outcome.beta.size
    if g.dim < k:
        raise DimensionMismatch(f"g has dimension {g.dim} < {k} coefficients")
    d = design or FusionDesign.from_dataset(ds, outcome, g, prop if kind.needs_propensity else None,
                                           imp if kind.needs_imputation else None)
    nargs = nuisance_args(prop if kind.needs_propensity else None, imp if kind.needs_imputation else None)

    def mean_u(beta):
        return d.moments(kind, beta, **nargs).mean(axis=0)

    theta0 = initial_theta(ds, outcome, imp) if init is None else np.asarray(init, dtype=float)
    diag: dict = {"method": "newton" if g.dim == k else "two-step-gmm"}
    if g.dim == k:
        theta = _newton(mean_u, theta0, tol, max_iter, weak_threshold, diag)
    else:
        theta1, it1, _ = _gauss_newton(mean_u, theta0, np.eye(g.dim), tol, max_iter)
        u1 = d.moments(kind, theta1, **nargs)
        u1c = u1 - u1.mean(axis=0)
        omega = u1c.T @ u1c / d.n
        try:
            weight = np.linalg.inv(omega)
        except np.linalg.LinAlgError:
            raise SingularJacobian("moment covariance is singular at the first GMM step") from None
        theta, it2, val = _gauss_newton(mean_u, theta1, weight, tol, max_iter)
        jac = numeric_jacobian(mean_u, theta)
        _check_jacobian(jac, weak_threshold, diag)
        diag.update(iterations=it1 + it2, objective=val, weight=weight,
                    residual_norm=float(np.max(np.abs(mean_u(theta)))))
    names = ["(Intercept)" if t == "1" else t for t in outcome.terms] + list(ds.schema.l_names)
    return FitResult(kind, theta, names, diag, n=ds.n, outcome=outcome.with_beta(theta), g=g)


# -- end-to-end point estimation -------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    """Everything needed to go from a dataset to a point estimate."""

    kind: EstimatorKind
    outcome_terms: tuple[str, ...]
    g: GSpec
    propensity_terms: tuple[str, ...] | None = None
    imputation_terms: tuple[str, ...] | None = None
    family: str = LINEAR

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        object.__setattr__(self, "outcome_terms", tuple(self.outcome_terms))
        for name in ("propensity_terms", "imputation_terms"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(v))
        if self.kind.needs_propensity and not self.propensity_terms:
            raise ValueError(f"{self.kind.value} needs propensity terms")
        if self.kind.needs_imputation and not self.imputation_terms:
            raise ValueError(f"{self.kind.value} needs imputation terms")

    def outcome_template(self, p: int) -> OutcomeModel:
        return OutcomeModel(self.family, self.outcome_terms, np.zeros(len(self.outcome_terms) + p))


def fit_nuisances(ds: FusedDataset, config: EstimatorConfig):
    from .nuisance import fit_imputation, fit_propensity

    prop = fit_propensity(ds, config.propensity_terms) if config.kind.needs_propensity else None
    imp = fit_imputation(ds, config.imputation_terms) if config.kind.needs_imputation else None
    return prop, imp


def fit_point(ds: FusedDataset, config: EstimatorConfig, init=None):
    """Fit nuisance models and solve; returns ``(FitResult, prop, imp)``."""
    prop, imp = fit_nuisances(ds, config)
    outcome = config.outcome_template(ds.schema.p)
    if init is None and imp is None and config.imputation_terms:
        from .nuisance import fit_imputation

        init = initial_theta(ds, outcome, fit_imputation(ds, config.imputation_terms))
    fit = solve(ds, config.kind, config.g, outcome, prop, imp, init)
    return fit, prop, imp
