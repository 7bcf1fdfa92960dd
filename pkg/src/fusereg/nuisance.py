"""Working models: data source, covariate and outcome.

* the data-source model ``pi(V; eta)`` is logistic in a design built from V;
* the covariate model ``t(L | V; alpha)`` is multivariate normal with mean
  ``alpha^T z(V)`` and constant covariance ``sigma_l``;
* the outcome model ``f(Y | V, L; theta)`` is linear-normal or logistic
  with linear predictor ``beta^T (x(V), L)``.

Matrix-valued nuisance parameters are flattened column-major (Fortran
order): ``vec(alpha)`` stacks the coefficient columns of each L dimension,
and covariance parameters are the column-major lower triangle of
``sigma_l`` including the diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .data import FusedDataset, Record
from .errors import EmptySource, FitError, NoConvergence, RankDeficient, Separation
from .formula import check_full_rank, design_matrix

PI_CLAMP = 1e-12
GH_NODES = 32

LINEAR = "linear-normal"
LOGISTIC = "logistic-binary"
FAMILIES = (LINEAR, LOGISTIC)


@lru_cache(maxsize=None)
def normal_rule(n: int = GH_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite rule rescaled to the standard normal measure."""
    x, w = np.polynomial.hermite.hermgauss(n)
    nodes, weights = x * np.sqrt(2.0), w / np.sqrt(np.pi)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _v_columns(v) -> tuple[dict[str, np.ndarray], int]:
    if isinstance(v, FusedDataset):
        return v.columns(), v.n
    if isinstance(v, Record):
        v = v.v
    if isinstance(v, Mapping):
        return {k: np.atleast_1d(np.asarray(x, dtype=float)) for k, x in v.items()}, 1
    raise TypeError(f"expected a dataset, record or mapping of V values, got {type(v).__name__}")


def _design(terms: Sequence[str], v) -> tuple[np.ndarray, bool]:
    """Design rows for ``v``; the flag says whether a single row was requested."""
    if isinstance(v, np.ndarray):
        x = np.atleast_2d(v)
        if x.shape[1] != len(terms):
            raise ValueError(f"design row has {x.shape[1]} entries, expected {len(terms)}")
        return x, v.ndim == 1
    cols, n = _v_columns(v)
    return design_matrix(terms, cols, n), not isinstance(v, FusedDataset)


# -- data source model ---------------------------------------------------------

@dataclass(frozen=True)
class PropensityFit:
    terms: tuple[str, ...]
    eta: np.ndarray
    loglik: float = float("nan")
    converged: bool = True
    iterations: int = 0

    def design(self, v) -> np.ndarray:
        return _design(self.terms, v)[0]


def propensity_loglik(eta, w: np.ndarray, r: np.ndarray) -> float:
    return kernels.logistic_loglik_grad_hess(w, r, eta)[0]


def fit_propensity(
    ds: FusedDataset,
    terms: Sequence[str],
    *,
    tol: float = 1e-10,
    max_iter: int = 100,
    max_norm: float = 30.0,
) -> PropensityFit:
    """Logistic maximum likelihood for source membership by damped Newton-Raphson.

    Convergence requires ``max |score| < tol`` (score summed over rows).
    Coefficients growing past ``max_norm`` are taken as separation.
    """
    terms = tuple(terms)
    w = design_matrix(terms, ds.columns(), ds.n)
    check_full_rank(w, "propensity model")
    r = ds.r
    eta = np.zeros(w.shape[1])
    ll, grad, hess = kernels.logistic_loglik_grad_hess(w, r, eta)
    it = 0
    converged = np.max(np.abs(grad)) < tol
    while not converged and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise RankDeficient("propensity Hessian is singular") from None
        t = 1.0
        while True:
            cand = eta + t * step
            ll_c, grad_c, hess_c = kernels.logistic_loglik_grad_hess(w, r, cand)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        small_step = np.max(np.abs(cand - eta)) <= 1e-14 * (1.0 + np.max(np.abs(eta)))
        eta, ll, grad, hess = cand, ll_c, grad_c, hess_c
        if np.max(np.abs(eta)) > max_norm:
            raise Separation(f"propensity coefficients diverge (max |eta| = {np.max(np.abs(eta)):.3g})")
        converged = np.max(np.abs(grad)) < tol or small_step
    if not converged:
        raise NoConvergence(
            f"propensity fit did not converge in {max_iter} iterations (max |score| = {np.max(np.abs(grad)):.3g})",
            best=eta,
        )
    eta.setflags(write=False)
    return PropensityFit(terms, eta, float(ll), True, it)


def predict_pi(fit: PropensityFit, v):
    """Fitted source-A probability, clamped to ``[1e-12, 1 - 1e-12]``.

    ``v`` may be a dataset (vector result), a record or mapping of V values,
    or design rows already expanded over ``fit.terms``.
    """
    x, single = _design(fit.terms, v)
    pi = np.clip(kernels.expit(x @ fit.eta), PI_CLAMP, 1.0 - PI_CLAMP)
    return float(pi[0]) if single else pi


def propensity_scores(eta, w: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Per-row scores ``(R - pi) w``; shape (n, len(eta))."""
    pi = kernels.expit(w @ np.asarray(eta, dtype=float))
    return (r - pi)[:, None] * w


def score_eta(fit: PropensityFit, row: Record) -> np.ndarray:
    w = fit.design(row)
    return propensity_scores(fit.eta, w, np.array([float(row.r)]))[0]


# -- covariate model -----------------------------------------------------------

@dataclass(frozen=True)
class ImputationFit:
    terms: tuple[str, ...]
    alpha: np.ndarray  # (len(terms), p)
    sigma_l: np.ndarray  # (p, p)
    converged: bool = True

    @property
    def p(self) -> int:
        return self.alpha.shape[1]

    def design(self, v) -> np.ndarray:
        return _design(self.terms, v)[0]

    def mean(self, v) -> np.ndarray:
        return self.design(v) @ self.alpha

    def params(self) -> np.ndarray:
        return np.concatenate([self.alpha.ravel(order="F"), vech(self.sigma_l)])


def vech(s: np.ndarray) -> np.ndarray:
    """Column-major lower triangle including the diagonal."""
    s = np.asarray(s)
    p = s.shape[0]
    return np.array([s[i, j] for j in range(p) for i in range(j, p)])


def unvech(x, p: int) -> np.ndarray:
    s = np.zeros((p, p))
    k = 0
    for j in range(p):
        for i in range(j, p):
            s[i, j] = s[j, i] = x[k]
            k += 1
    return s


def split_imputation_params(x, n_terms: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    k = n_terms * p
    return x[:k].reshape((n_terms, p), order="F"), unvech(x[k:], p)


def fit_imputation(ds: FusedDataset, terms: Sequence[str]) -> ImputationFit:
    """Least squares of L on the covariate design over source B.

    ``sigma_l`` is the residual covariance with denominator ``n_B`` (the
    normal maximum likelihood value).
    """
    terms = tuple(terms)
    if ds.n_b == 0:
        raise EmptySource("no source-B rows to fit the covariate model")
    cols = {k: v[~ds.in_a] for k, v in ds.columns().items()}
    z = design_matrix(terms, cols, ds.n_b)
    if ds.n_b <= len(terms):
        raise RankDeficient(f"covariate model: n_B = {ds.n_b} rows for {len(terms)} terms")
    check_full_rank(z, "covariate model")
    alpha, *_ = np.linalg.lstsq(z, ds.l, rcond=None)
    resid = ds.l - z @ alpha
    sigma = resid.T @ resid / ds.n_b
    sigma = 0.5 * (sigma + sigma.T)
    alpha.setflags(write=False)
    sigma.setflags(write=False)
    return ImputationFit(terms, alpha, sigma, True)


def imputation_loglik(alpha, sigma_l, z: np.ndarray, l: np.ndarray, r: np.ndarray) -> float:
    """``sum (1 - R) log t(L | V)`` over all rows; ``l`` rows with R=1 are ignored."""
    b = r == 0
    resid = l[b] - z[b] @ alpha
    p = l.shape[1]
    sign, logdet = np.linalg.slogdet(sigma_l)
    if sign <= 0:
        return -np.inf
    quad = np.einsum("ij,ij->i", resid @ np.linalg.inv(sigma_l), resid)
    return float(-0.5 * np.sum(quad) - 0.5 * b.sum() * (logdet + p * np.log(2 * np.pi)))


def imputation_scores(alpha, sigma_l, z: np.ndarray, l: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Per-row scores for ``(vec alpha, vech sigma_l)``; zero on source-A rows."""
    alpha = np.asarray(alpha, dtype=float)
    sigma_l = np.asarray(sigma_l, dtype=float)
    n, p = l.shape
    k = z.shape[1]
    b = (1.0 - r)[:, None]
    prec = np.linalg.inv(sigma_l)
    resid = (l - z @ alpha) * b
    scaled = resid @ prec  # (n, p)
    # d/d alpha[:, j] = z * scaled[:, j]
    s_alpha = (z[:, :, None] * scaled[:, None, :]).reshape(n, k * p, order="F")
    # d/d sigma = 0.5 (P r r^T P - P), off-diagonals counted twice under vech
    outer = scaled[:, :, None] * scaled[:, None, :]
    g = 0.5 * (outer - prec[None, :, :] * b[:, :, None])
    cols = []
    for j in range(p):
        for i in range(j, p):
            cols.append(g[:, i, j] * (1.0 if i == j else 2.0))
    return np.hstack([s_alpha, np.column_stack(cols)])


def score_alpha(fit: ImputationFit, row: Record) -> np.ndarray:
    """Coefficient part of the covariate score for one row, column-major."""
    return _imputation_row_scores(fit, row)[: fit.alpha.size]


def score_sigma_l(fit: ImputationFit, row: Record) -> np.ndarray:
    return _imputation_row_scores(fit, row)[fit.alpha.size:]


def _imputation_row_scores(fit: ImputationFit, row: Record) -> np.ndarray:
    z = fit.design(row)
    l = np.zeros((1, fit.p)) if row.l is None else np.asarray(row.l, dtype=float).reshape(1, -1)
    return imputation_scores(fit.alpha, fit.sigma_l, z, l, np.array([float(row.r)]))[0]


# -- outcome model -------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeModel:
    """Outcome family with coefficients on ``(x(V), L)``.

    ``terms`` are the V terms; every L column enters linearly after them.
    """

    family: str
    terms: tuple[str, ...]
    beta: np.ndarray
    sigma_y: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown outcome family {self.family!r}")
        object.__setattr__(self, "terms", tuple(self.terms))
        beta = np.asarray(self.beta, dtype=float)
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        object.__setattr__(self, "beta", beta)
        if self.sigma_y is not None and not self.sigma_y > 0:
            raise ValueError("sigma_y must be positive")

    @property
    def n_v(self) -> int:
        return len(self.terms)

    @property
    def beta_v(self) -> np.ndarray:
        return self.beta[: self.n_v]

    @property
    def beta_l(self) -> np.ndarray:
        return self.beta[self.n_v:]

    def with_beta(self, beta) -> "OutcomeModel":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def design(self, v) -> np.ndarray:
        return _design(self.terms, v)[0]

    def link(self, lin):
        return kernels.expit(lin) if self.family == LOGISTIC else lin


def outcome_zero(family: str, terms: Sequence[str], p: int) -> OutcomeModel:
    return OutcomeModel(family, tuple(terms), np.zeros(len(terms) + p))


def cond_mean_vl(family: str, beta, x: np.ndarray, l: np.ndarray) -> np.ndarray:
    """``E[Y | V, L]`` for design rows ``x`` and covariates ``l``."""
    beta = np.asarray(beta, dtype=float)
    k = x.shape[1]
    lin = x @ beta[:k] + l @ beta[k:]
    return kernels.expit(lin) if family == LOGISTIC else lin


def cond_mean_v(family: str, beta, x: np.ndarray, l_mean: np.ndarray, sigma_l, nodes: int = GH_NODES) -> np.ndarray:
    """``E[Y | V]`` integrating L over ``N(l_mean, sigma_l)``.

    The linear predictor depends on L only through ``beta_L^T L``, which is
    univariate normal, so one Gauss-Hermite dimension suffices for any p.
    """
    beta = np.asarray(beta, dtype=float)
    k = x.shape[1]
    beta_l = beta[k:]
    center = x @ beta[:k] + l_mean @ beta_l
    if family == LINEAR:
        return center
    var = float(beta_l @ np.asarray(sigma_l) @ beta_l)
    scale = np.full(center.shape, np.sqrt(max(var, 0.0)))
    z, w = normal_rule(nodes)
    return kernels.normal_expit_mean(center, scale, z, w)


def _vl_arrays(v, l) -> tuple[dict, int, np.ndarray]:
    cols, n = _v_columns(v)
    l = np.asarray(l, dtype=float).reshape(n, -1)
    return cols, n, l


def mean_y_given_vl(m: OutcomeModel, v, l):
    """``E_theta[Y | V, L]`` for a record/mapping of V values and an L vector."""
    cols, n, l = _vl_arrays(v, l)
    if l.shape[1] + m.n_v != m.beta.size:
        raise ValueError("L length does not match the outcome coefficients")
    out = cond_mean_vl(m.family, m.beta, design_matrix(m.terms, cols, n), l)
    return float(out[0]) if n == 1 and not isinstance(v, FusedDataset) else out


def mean_y_given_v(m: OutcomeModel, imp: ImputationFit, v, nodes: int = GH_NODES):
    """``E_{theta, alpha}[Y | V]``; closed form for the linear family."""
    cols, n = _v_columns(v)
    if imp.p + m.n_v != m.beta.size:
        raise ValueError("covariate model dimension does not match the outcome coefficients")
    x = design_matrix(m.terms, cols, n)
    l_mean = design_matrix(imp.terms, cols, n) @ imp.alpha
    out = cond_mean_v(m.family, m.beta, x, l_mean, imp.sigma_l, nodes)
    return float(out[0]) if n == 1 and not isinstance(v, FusedDataset) else out


def estimate_sigma_y(m: OutcomeModel, imp: ImputationFit, ds: FusedDataset) -> float:
    """Residual SD of Y given (V, L) for the linear family.

    Source-A residuals ``Y - E[Y | V]`` have variance
    ``sigma_y^2 + beta_L^T sigma_l beta_L``; the second part is removed.
    """
    if m.family != LINEAR:
        raise FitError("sigma_y is only defined for the linear-normal family")
    cols = {k: v[ds.in_a] for k, v in ds.columns().items()}
    x = design_matrix(m.terms, cols, ds.n_a)
    l_mean = design_matrix(imp.terms, cols, ds.n_a) @ imp.alpha
    resid = ds.y - cond_mean_v(LINEAR, m.beta, x, l_mean, imp.sigma_l)
    var = float(np.mean(resid ** 2) - m.beta_l @ imp.sigma_l @ m.beta_l)
    if var <= 0:
        raise FitError("estimated residual variance of Y given (V, L) is not positive")
    return float(np.sqrt(var))
