"""Variance estimation, intervals and pooling.

The sandwich estimator stacks the estimating functions with the nuisance
scores so that first-stage estimation of the data-source and covariate
models is accounted for. All derivative blocks are central differences.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .data import FusedDataset
from .errors import (
    FusionError,
    InferenceError,
    LayoutMismatch,
    SingularBread,
    TooManyFailures,
)
from .estimating import (
    EstimatorConfig,
    EstimatorKind,
    FitResult,
    FusionDesign,
    fit_point,
    numeric_jacobian,
)
from .nuisance import (
    ImputationFit,
    PropensityFit,
    imputation_scores,
    propensity_scores,
    split_imputation_params,
    vech,
)

RESULT_SCHEMA_VERSION = 1


class StackedSystem:
    """Estimating functions stacked with the nuisance scores.

    The nuisance vector is ``eta`` for IPW, ``(vec alpha, vech sigma_l)``
    for IMP and their concatenation for DR.
    """

    def __init__(self, design: FusionDesign, kind, prop: PropensityFit | None, imp: ImputationFit | None):
        self.design = design
        self.kind = EstimatorKind(kind)
        self.prop = prop if self.kind.needs_propensity else None
        self.imp = imp if self.kind.needs_imputation else None
        parts = []
        self.n_eta = 0
        if self.prop is not None:
            parts.append(np.asarray(self.prop.eta, dtype=float))
            self.n_eta = self.prop.eta.size
        if self.imp is not None:
            parts.append(self.imp.params())
            self.n_terms, self.p = self.imp.alpha.shape
        self.phi_hat = np.concatenate(parts) if parts else np.zeros(0)

    @property
    def dim_phi(self) -> int:
        return self.phi_hat.size

    def split(self, phi) -> dict:
        out = {"eta": None, "alpha": None, "sigma_l": None}
        if self.prop is not None:
            out["eta"] = phi[: self.n_eta]
        if self.imp is not None:
            out["alpha"], out["sigma_l"] = split_imputation_params(phi[self.n_eta:], self.n_terms, self.p)
        return out

    def estimating(self, theta, phi) -> np.ndarray:
        return self.design.moments(self.kind, theta, **self.split(phi))

    def scores(self, phi) -> np.ndarray:
        d = self.design
        p = self.split(phi)
        blocks = []
        if self.prop is not None:
            blocks.append(propensity_scores(p["eta"], d.w, d.r))
        if self.imp is not None:
            blocks.append(imputation_scores(p["alpha"], p["sigma_l"], d.z, d.l, d.r))
        return np.hstack(blocks) if blocks else np.zeros((d.n, 0))

    def stacked(self, theta, phi) -> np.ndarray:
        return np.hstack([self.estimating(theta, phi), self.scores(phi)])

    def blocks(self, theta):
        """``(U, S, G_theta, G_phi, M)`` at ``(theta, phi_hat)``."""
        phi = self.phi_hat
        u = self.estimating(theta, phi)
        s = self.scores(phi)
        g_theta = numeric_jacobian(lambda t: self.estimating(t, phi).mean(axis=0), theta)
        if self.dim_phi:
            g_phi = numeric_jacobian(lambda f: self.estimating(theta, f).mean(axis=0), phi)
            m = numeric_jacobian(lambda f: self.scores(f).mean(axis=0), phi)
        else:
            g_phi = np.zeros((u.shape[1], 0))
            m = np.zeros((0, 0))
        return u, s, g_theta, g_phi, m


def _inv(a: np.ndarray, what: str) -> np.ndarray:
    if a.size == 0:
        return a
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularBread(f"{what} is not invertible (condition {cond:.3g})")
    return np.linalg.inv(a)


def sandwich_covariance(
    ds: FusedDataset,
    fit: FitResult,
    prop: PropensityFit | None = None,
    imp: ImputationFit | None = None,
    *,
    known_nuisance: bool = False,
    design: FusionDesign | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked sandwich covariance of ``fit.theta``.

    Returns ``(Sigma, Sigma / n)``: the asymptotic covariance of
    ``sqrt(n) (theta_hat - theta)`` and the per-sample covariance. With
    ``known_nuisance`` the nuisance correction is dropped, treating the
    supplied fits as fixed.
    """
    kind = fit.estimator
    d = design or FusionDesign.from_dataset(
        ds, fit.outcome, fit.g, prop if kind.needs_propensity else None, imp if kind.needs_imputation else None
    )
    system = StackedSystem(d, kind, prop, imp)
    u, s, g_theta, g_phi, m = system.blocks(fit.theta)
    if known_nuisance or system.dim_phi == 0:
        infl = u
    else:
        psi = -s @ _inv(m, "nuisance score Jacobian M").T
        infl = u + psi @ g_phi.T
    meat = infl.T @ infl / d.n
    k = fit.theta.size
    if g_theta.shape[0] == k:
        bread = _inv(g_theta, "estimating-equation Jacobian G_theta")
        sigma = bread @ meat @ bread.T
    else:
        w = fit.solver.get("weight")
        if w is None:
            w = _inv(meat, "moment covariance")
        a = _inv(g_theta.T @ w @ g_theta, "GMM normal matrix")
        sigma = a @ g_theta.T @ w @ meat @ w @ g_theta @ a
    sigma = 0.5 * (sigma + sigma.T)
    return sigma, sigma / d.n


def z_value(level: float) -> float:
    return float(stats.norm.ppf(0.5 + level / 2.0))


def wald_ci(fit: FitResult, level: float = 0.95) -> list[tuple[float, float, float]]:
    """``theta_j +- z * se_j`` per coefficient, as ``(lo, hi, level)``."""
    if fit.covariance is None:
        raise InferenceError("fit has no covariance estimate")
    z = z_value(level)
    se = fit.std_errors
    return [(float(t - z * s), float(t + z * s), level) for t, s in zip(fit.theta, se)]


def fit_with_inference(ds: FusedDataset, config: EstimatorConfig, level: float = 0.95):
    """Point estimate, sandwich covariance and Wald intervals.

    Returns ``(FitResult, prop, imp)``.
    """
    fit, prop, imp = fit_point(ds, config)
    sigma, cov = sandwich_covariance(ds, fit, prop, imp)
    fit.asymptotic_covariance = sigma
    fit.covariance = cov
    fit.wald_intervals = wald_ci(fit, level)
    fit.diagnostics["level"] = level
    return fit, prop, imp


# -- bootstrap -------------------------------------------------------------------

@dataclass
class BootstrapResult:
    covariance: np.ndarray
    estimates: np.ndarray
    failures: int
    B: int


def bootstrap_covariance(ds: FusedDataset, config: EstimatorConfig, B: int, seed: int) -> BootstrapResult:
    """Nonparametric bootstrap, refitting the nuisance models on every resample.

    Replicate ``b`` draws from its own stream derived from ``(seed, b)``.
    """
    if B < 50:
        raise ValueError("bootstrap needs at least 50 replicates")
    estimates = []
    failures = 0
    for b in range(B):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, b])))
        idx = rng.integers(0, ds.n, ds.n)
        try:
            fit, _, _ = fit_point(ds.take(idx), config)
        except FusionError:
            failures += 1
            continue
        estimates.append(fit.theta)
    if failures > 0.1 * B:
        raise TooManyFailures(f"{failures} of {B} bootstrap resamples failed")
    est = np.array(estimates)
    return BootstrapResult(np.cov(est, rowvar=False, ddof=1), est, failures, B)


# -- Rubin's rules -----------------------------------------------------------------

@dataclass
class PooledResult:
    names: list[str]
    estimate: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    m: int
    df: np.ndarray
    intervals: list[tuple[float, float, float]] = field(default_factory=list)
    estimator: str | None = None

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.total))


def rubin_pool(results: Sequence[FitResult], level: float = 0.95) -> PooledResult:
    """Pool multiply-imputed fits.

    Estimate is the mean, ``W`` the mean covariance, ``B`` the sample
    covariance of the estimates and ``T = W + (1 + 1/m) B``. Intervals use a
    t reference with Rubin's degrees of freedom (normal when ``B = 0``).
    """
    if not results:
        raise LayoutMismatch("nothing to pool")
    names = list(results[0].names)
    for r in results:
        if list(r.names) != names:
            raise LayoutMismatch(f"coefficient layouts differ: {names} vs {list(r.names)}")
        if r.covariance is None:
            raise InferenceError("every result needs a covariance to pool")
    m = len(results)
    est = np.array([r.theta for r in results])
    qbar = est.mean(axis=0)
    w = np.mean([r.covariance for r in results], axis=0)
    b = np.cov(est, rowvar=False, ddof=1).reshape(len(names), len(names)) if m > 1 else np.zeros_like(w)
    t = w + (1.0 + 1.0 / m) * b
    bd, wd = np.diag(b), np.diag(w)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_inc = (1.0 + 1.0 / m) * bd / wd
        df = np.where(bd > 0, (m - 1) * (1.0 + 1.0 / r_inc) ** 2, np.inf)
    intervals = []
    for j in range(len(names)):
        q = stats.norm.ppf(0.5 + level / 2) if not np.isfinite(df[j]) else stats.t.ppf(0.5 + level / 2, df[j])
        se = math.sqrt(t[j, j])
        intervals.append((float(qbar[j] - q * se), float(qbar[j] + q * se), level))
    kinds = {r.estimator for r in results}
    estimator = EstimatorKind(kinds.pop()).value if len(kinds) == 1 else None
    return PooledResult(names, qbar, w, b, t, m, df, intervals, estimator)


# -- result documents ----------------------------------------------------------------

def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items() if not isinstance(v, np.ndarray) or v.ndim <= 2}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def result_document(fit: FitResult) -> dict:
    """Stable JSON-ready description of a fit.

    Fields: ``schema_version``, ``kind`` ("fit"), ``estimator``, ``n``,
    ``level``, ``coefficients`` (list of ``name``, ``estimate``,
    ``std_error``, ``ci_lo``, ``ci_hi``), ``covariance`` (per-sample,
    row-major nested lists) and ``diagnostics``.
    """
    se = fit.std_errors if fit.covariance is not None else [None] * fit.theta.size
    ci = fit.wald_intervals or [(None, None, None)] * fit.theta.size
    coefs = [
        {"name": nm, "estimate": float(t), "std_error": s if s is None else float(s), "ci_lo": lo, "ci_hi": hi}
        for nm, t, s, (lo, hi, _) in zip(fit.names, fit.theta, se, ci)
    ]
    solver = {k: v for k, v in fit.solver.items() if k != "weight"}
    return _clean({
        "schema_version": RESULT_SCHEMA_VERSION,
        "kind": "fit",
        "estimator": EstimatorKind(fit.estimator).value,
        "n": fit.n,
        "level": fit.diagnostics.get("level", 0.95),
        "coefficients": coefs,
        "covariance": None if fit.covariance is None else fit.covariance,
        "diagnostics": {"solver": solver, **{k: v for k, v in fit.diagnostics.items() if k != "level"}},
    })


def pooled_document(pooled: PooledResult) -> dict:
    """JSON-ready pooled result; ``std_error`` is the square root of the total variance."""
    coefs = []
    for j, nm in enumerate(pooled.names):
        lo, hi, _ = pooled.intervals[j]
        coefs.append({
            "name": nm,
            "estimate": float(pooled.estimate[j]),
            "std_error": float(pooled.std_errors[j]),
            "ci_lo": lo,
            "ci_hi": hi,
            "within_variance": float(pooled.within[j, j]),
            "between_variance": float(pooled.between[j, j]),
            "total_variance": float(pooled.total[j, j]),
            "df": float(pooled.df[j]) if np.isfinite(pooled.df[j]) else None,
        })
    return _clean({
        "schema_version": RESULT_SCHEMA_VERSION,
        "kind": "pooled",
        "estimator": pooled.estimator,
        "m": pooled.m,
        "level": pooled.intervals[0][2] if pooled.intervals else 0.95,
        "coefficients": coefs,
        "covariance": pooled.total,
        "diagnostics": {},
    })


def fit_from_document(doc: dict) -> FitResult:
    """Rebuild the parts of a :class:`FitResult` needed for pooling."""
    try:
        coefs = doc["coefficients"]
        names = [c["name"] for c in coefs]
        theta = np.array([c["estimate"] for c in coefs], dtype=float)
        if doc.get("covariance") is not None:
            cov = np.array(doc["covariance"], dtype=float)
        else:
            cov = np.diag([c["std_error"] ** 2 for c in coefs])
        kind = EstimatorKind(doc["estimator"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LayoutMismatch(f"not a fit result document: {exc}") from None
    if cov.shape != (len(names), len(names)):
        raise LayoutMismatch("covariance shape does not match the coefficient list")
    return FitResult(kind, theta, names, {}, covariance=cov, n=int(doc.get("n", 0)))


def write_document(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def read_document(path) -> dict:
    return json.loads(Path(path).read_text())
