"""Locally efficient index functions.

Two constructions are provided.

Binary outcomes
    The optimal ``h(V)`` for the DR estimating function is
    ``-E[grad M | V] E[M^2 | V]^{-1}``, where ``M`` is the scalar DR factor
    ``R/pi (Y - m) + (1-R)/(1-pi) (m - mu)``. The two conditional moments are
    computed by Monte Carlo, by exhaustive enumeration when the covariate
    law has finite support, or by one-dimensional quadrature.

Continuous outcomes
    A finite basis ``psi_j(Y, V)`` is pushed through the operator ``K``
    (the DR transformation applied componentwise) and the best linear
    combination ``tau`` is estimated from empirical moments. ``K`` maps
    every function of V alone to zero, so the basis only holds functions
    that involve Y.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels
from .data import FusedDataset, Record
from .errors import DegenerateVariance, FitError, IllConditionedGram
from .estimating import (
    EstimatorConfig,
    EstimatorKind,
    FitResult,
    FusionDesign,
    GSpec,
    fit_point,
    nuisance_args,
    numeric_jacobian,
    solve,
)
from .formula import design_matrix
from .nuisance import (
    GH_NODES,
    LINEAR,
    LOGISTIC,
    PI_CLAMP,
    ImputationFit,
    OutcomeModel,
    PropensityFit,
    estimate_sigma_y,
    normal_rule,
)

POLYNOMIAL = "polynomial"
TRIGONOMETRIC = "trigonometric"
GRAM_COND_MAX = 1e10
VAR_FLOOR = 1e-12


# -- basis ---------------------------------------------------------------------

@dataclass(frozen=True)
class BasisSpec:
    """A tensor basis in ``(Y, V)``.

    Each function is ``a(Y) * b(V)`` with ``a`` from a Y ladder of degree at
    least one and ``b`` from a ladder over the V columns (including the
    constant). Functions are ordered by total degree, then by Y degree,
    then lexicographically, and the first ``K`` are kept.

    Coordinates are standardized with fixed affine maps: sample ranges go
    to ``[-pi, pi]`` for the trigonometric family and ``[-1, 1]`` for the
    polynomial family. ``center`` and ``half_range`` hold those maps in the
    order ``(Y, *v_names)``.
    """

    family: str
    K: int
    v_names: tuple[str, ...]
    center: tuple[float, ...]
    half_range: tuple[float, ...]

    def __post_init__(self):
        if self.family not in (POLYNOMIAL, TRIGONOMETRIC):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.K < 1:
            raise ValueError("K must be positive")
        object.__setattr__(self, "v_names", tuple(self.v_names))
        if len(self.center) != len(self.v_names) + 1 or len(self.half_range) != len(self.center):
            raise ValueError("standardization needs one entry for Y and one per V column")
        if any(not h > 0 for h in self.half_range):
            raise ValueError("standardization ranges must be positive")

    @classmethod
    def from_data(cls, ds: FusedDataset, family: str = POLYNOMIAL, K: int | None = None,
                  v_names: Sequence[str] | None = None, dim_beta: int | None = None) -> "BasisSpec":
        """Fit the standardization to ``ds``; ``K`` defaults to ``2 * dim_beta``."""
        if K is None:
            if dim_beta is None:
                raise ValueError("give K or dim_beta")
            K = 2 * dim_beta
        v_names = tuple(ds.schema.v_names if v_names is None else v_names)
        cols = ds.columns()
        data = [ds.y] + [cols[v] for v in v_names]
        center, half = [], []
        for x in data:
            lo, hi = float(np.min(x)), float(np.max(x))
            half_range = (hi - lo) / 2.0
            center.append((hi + lo) / 2.0)
            half.append(half_range if half_range > 0 else 1.0)
        return cls(family, K, v_names, tuple(center), tuple(half))

    @property
    def scale(self) -> float:
        return np.pi if self.family == TRIGONOMETRIC else 1.0

    def standardize(self, x, j: int):
        return (np.asarray(x, dtype=float) - self.center[j]) / self.half_range[j] * self.scale

    def index(self) -> list[tuple[tuple, tuple]]:
        """Labels ``(y_atom, v_atoms)`` of the K basis functions, in order."""
        return _enumerate(self.family, len(self.v_names), self.K)

    def labels(self) -> list[str]:
        names = ("Y",) + self.v_names
        out = []
        for y_atom, v_atoms in self.index():
            parts = [_atom_label(self.family, names[0], *y_atom)]
            parts += [_atom_label(self.family, names[j + 1], *a) for j, a in enumerate(v_atoms) if a[1] > 0]
            out.append("*".join(parts))
        return out

    def matrix(self, y, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Basis values, shape ``(n, K)``."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        n = y.size
        u = [self.standardize(y, 0)] + [
            np.broadcast_to(self.standardize(columns[v], j + 1), (n,)) for j, v in enumerate(self.v_names)
        ]
        out = np.empty((n, self.K))
        for col, (y_atom, v_atoms) in enumerate(self.index()):
            val = _atom(self.family, u[0], *y_atom)
            for j, a in enumerate(v_atoms):
                if a[1] > 0:
                    val = val * _atom(self.family, u[j + 1], *a)
            out[:, col] = val
        return out

    def gspec(self, tau: np.ndarray | None = None, keep: np.ndarray | None = None) -> GSpec:
        """A custom-basis :class:`GSpec`, optionally restricted to columns ``keep``."""
        if keep is None:
            return GSpec(kind="custom-basis", basis=self.matrix, n_basis=self.K, tau=tau)
        keep = np.asarray(keep)

        def basis(y, columns):
            return self.matrix(y, columns)[:, keep]

        return GSpec(kind="custom-basis", basis=basis, n_basis=int(keep.size), tau=tau)


def _atoms(family: str, max_degree: int, with_constant: bool) -> list[tuple[str, int]]:
    """``(kind, degree)`` atoms for one coordinate, ordered by degree."""
    out = [("const", 0)] if with_constant else []
    for d in range(1, max_degree + 1):
        if family == POLYNOMIAL:
            out.append(("pow", d))
        else:
            out += [("sin", d), ("cos", d)]
    return out


def _enumerate(family: str, n_v: int, K: int) -> list[tuple[tuple, tuple]]:
    max_degree = 1
    while True:
        y_atoms = _atoms(family, max_degree, with_constant=False)
        v_ladders = [_atoms(family, max_degree, with_constant=True)] * n_v
        items = []
        for ya in y_atoms:
            for va in itertools.product(*v_ladders):
                total = ya[1] + sum(a[1] for a in va)
                if total <= max_degree:
                    items.append((total, ya[1], ya[1], tuple(_order_key(a) for a in va), ya, va))
        if len(items) >= K:
            items.sort(key=lambda t: t[:4])
            return [(it[4], it[5]) for it in items[:K]]
        max_degree += 1


def _order_key(atom) -> tuple:
    # higher degree on earlier coordinates sorts first, so Y*A precedes Y*C
    kind, d = atom
    return (-d, {"const": 0, "pow": 0, "sin": 0, "cos": 1}[kind])


def _atom(family: str, u, kind: str, degree: int):
    if kind == "const":
        return np.ones_like(u)
    if kind == "pow":
        return u ** degree
    if kind == "sin":
        return np.sin(degree * u)
    return np.cos(degree * u)


def _atom_label(family: str, name: str, kind: str, degree: int) -> str:
    if kind == "pow":
        return name if degree == 1 else f"{name}^{degree}"
    return f"{kind}({degree}{name})" if degree > 1 else f"{kind}({name})"


def build_basis(spec: BasisSpec, row: Record | Mapping) -> np.ndarray:
    """Basis vector ``Psi_K(Y, V)`` for one record (or a mapping with a ``"Y"`` entry)."""
    if isinstance(row, Record):
        if row.y is None:
            raise ValueError("the basis needs an observed outcome")
        y, v = row.y, row.v
    else:
        v = dict(row)
        y = v.pop("Y")
    cols = {k: np.atleast_1d(np.asarray(x, dtype=float)) for k, x in v.items()}
    return spec.matrix(np.array([y], dtype=float), cols)[0]


# -- K operator ----------------------------------------------------------------

def _design_for(ds_or_row, g: GSpec, outcome: OutcomeModel, prop, imp) -> FusionDesign:
    if isinstance(ds_or_row, Record):
        return FusionDesign.from_record(ds_or_row, outcome, g, prop=prop, imp=imp)
    return FusionDesign.from_dataset(ds_or_row, outcome, g, prop=prop, imp=imp)


def k_operator(psi: GSpec | BasisSpec, theta, prop: PropensityFit, imp: ImputationFit,
               row: Record | FusedDataset, outcome: OutcomeModel) -> np.ndarray:
    """``K(psi)`` evaluated on a record (vector) or on every row of a dataset.

    ``psi`` is a custom-basis :class:`GSpec` or a :class:`BasisSpec`. The
    linear family needs ``outcome.sigma_y``.
    """
    g = psi.gspec() if isinstance(psi, BasisSpec) else psi
    outcome = outcome.with_beta(theta)
    d = _design_for(row, g, outcome, prop, imp)
    u = d.moments(EstimatorKind.DR, theta, **nuisance_args(prop, imp))
    return u[0] if isinstance(row, Record) else u


@dataclass
class TauResult:
    """Estimated optimal combination of a basis.

    ``tau`` is ``dim(beta) x K``; columns of dropped basis functions are
    zero. ``omega`` is the information matrix of the best combination.
    """

    tau: np.ndarray
    omega: np.ndarray
    gram: np.ndarray
    jacobian: np.ndarray
    keep: np.ndarray
    spec: BasisSpec | None = None

    def gspec(self) -> GSpec:
        if self.spec is None:
            raise ValueError("no basis attached")
        return self.spec.gspec(tau=self.tau[:, self.keep], keep=self.keep)


def tau_opt(ds: FusedDataset, spec: BasisSpec | GSpec, theta, prop: PropensityFit, imp: ImputationFit,
            outcome: OutcomeModel) -> TauResult:
    """Plug-in ``tau = -D^T G^{-1}`` and ``Omega = D^T G^{-1} D``.

    ``D`` is the empirical mean Jacobian of ``K(Psi)`` in ``theta`` and
    ``G`` the empirical second moment ``P_n[K K^T]``. Both use the full
    sample. Basis columns whose ``K`` image vanishes on the data are
    dropped before inverting ``G``.
    """
    g = spec.gspec() if isinstance(spec, BasisSpec) else spec
    if g.kind != "custom-basis" or g.tau is not None:
        raise ValueError("tau_opt needs an untransformed custom basis")
    theta = np.asarray(theta, dtype=float)
    outcome = outcome.with_beta(theta)
    d = FusionDesign.from_dataset(ds, outcome, g, prop=prop, imp=imp)
    nargs = nuisance_args(prop, imp)
    k = d.moments(EstimatorKind.DR, theta, **nargs)
    scale = np.sqrt(np.mean(k ** 2, axis=0))
    keep = np.flatnonzero(scale > 1e-10 * max(1.0, float(np.max(scale))))
    if keep.size < theta.size:
        raise IllConditionedGram(f"only {keep.size} basis functions survive K; need at least {theta.size}")
    kk = k[:, keep]
    gram = kk.T @ kk / d.n
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_COND_MAX:
        raise IllConditionedGram(f"Gram matrix of K(Psi) has condition {cond:.3g}")
    jac = numeric_jacobian(lambda b: d.moments(EstimatorKind.DR, b, **nargs)[:, keep].mean(axis=0), theta)
    ginv_d = np.linalg.solve(gram, jac)
    omega = jac.T @ ginv_d
    tau = np.zeros((theta.size, g.n_basis))
    tau[:, keep] = -ginv_d.T
    return TauResult(tau, 0.5 * (omega + omega.T), gram, jac, keep,
                     spec if isinstance(spec, BasisSpec) else None)


# -- optimal h for binary outcomes ---------------------------------------------

@dataclass(frozen=True)
class DiscreteCovariateLaw:
    """A finite-support law for L given V.

    ``support`` is ``(k, p)``; ``probs(columns)`` returns ``(n, k)`` row
    probabilities.
    """

    support: np.ndarray
    probs: Callable[[Mapping[str, np.ndarray]], np.ndarray]

    @property
    def p(self) -> int:
        return np.atleast_2d(self.support).shape[1]

    def table(self, columns, n) -> tuple[np.ndarray, np.ndarray]:
        s = np.atleast_2d(np.asarray(self.support, dtype=float))
        pr = np.asarray(self.probs(columns), dtype=float).reshape(n, s.shape[0])
        return s, pr


def _columns(v) -> tuple[dict[str, np.ndarray], int]:
    if isinstance(v, FusedDataset):
        return v.columns(), v.n
    if isinstance(v, Record):
        v = v.v
    cols = {k: np.atleast_1d(np.asarray(x, dtype=float)) for k, x in v.items()}
    return cols, len(next(iter(cols.values())))


def _pi(prop, cols, n) -> np.ndarray:
    if isinstance(prop, PropensityFit):
        lin = design_matrix(prop.terms, cols, n) @ prop.eta
        return np.clip(kernels.expit(lin), PI_CLAMP, 1.0 - PI_CLAMP)
    return np.clip(np.broadcast_to(np.asarray(prop(cols), dtype=float), (n,)), PI_CLAMP, 1.0 - PI_CLAMP)


def _mu_moments(outcome: OutcomeModel, law, x: np.ndarray, cols, n: int, nodes: int):
    """``m = E[mu | V]``, ``grad m``, and ``E[mu^2 | V]`` under the covariate law."""
    k = x.shape[1]
    bv, bl = outcome.beta[:k], outcome.beta[k:]
    if isinstance(law, DiscreteCovariateLaw):
        s, pr = law.table(cols, n)
        mu = kernels.expit((x @ bv)[:, None] + (s @ bl)[None, :])  # (n, k_support)
        w = pr * mu * (1 - mu)
        grad = np.hstack([x * w.sum(axis=1, keepdims=True), w @ s])
        return (pr * mu).sum(axis=1), grad, (pr * mu ** 2).sum(axis=1)
    l_mean = design_matrix(law.terms, cols, n) @ law.alpha
    sig = np.asarray(law.sigma_l)
    sd = float(np.sqrt(max(bl @ sig @ bl, 0.0)))
    z, wq = normal_rule(nodes)
    center = x @ bv + l_mean @ bl
    mu = kernels.expit(center[:, None] + sd * z[None, :])
    v = mu * (1 - mu)
    ev = v @ wq
    grad_l = l_mean * ev[:, None]
    if sd > 0:
        grad_l = grad_l + np.outer(v @ (wq * z), sig @ bl / sd)
    grad = np.hstack([x * ev[:, None], grad_l])
    return mu @ wq, grad, (mu ** 2) @ wq


def _sample_l(law, cols, n, draws, rng) -> np.ndarray:
    """Draws of L given each row, shape ``(n, draws, p)``."""
    if isinstance(law, DiscreteCovariateLaw):
        s, pr = law.table(cols, n)
        cum = np.cumsum(pr, axis=1)
        u = rng.random((n, draws))
        idx = (u[:, :, None] > cum[:, None, :]).sum(axis=2)
        return s[np.minimum(idx, s.shape[0] - 1)]
    l_mean = design_matrix(law.terms, cols, n) @ law.alpha
    chol = np.linalg.cholesky(np.asarray(law.sigma_l))
    e = rng.standard_normal((n, draws, law.p))
    return l_mean[:, None, :] + e @ chol.T


def _finish(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    if np.any(~np.isfinite(den)) or np.any(den < VAR_FLOOR):
        raise DegenerateVariance("E[M^2 | V] is below 1e-12 for some rows")
    return -num / den[:, None]


def h_opt_binary(v, outcome: OutcomeModel, prop, imp, mc_draws: int = 4096, seed: int = 0,
                 mode: str = "mc", nodes: int = GH_NODES, chunk: int = 256) -> np.ndarray:
    """Optimal index function ``h(V)`` for a logistic outcome model.

    Parameters
    ----------
    v : FusedDataset, Record or mapping
        Where to evaluate. Returns ``(n, dim beta)`` for datasets and
        column mappings, a vector for a single record.
    outcome : OutcomeModel
        Logistic model carrying the coefficients at which ``M`` is taken.
    prop : PropensityFit or callable
        Data-source probabilities; used both in the weights and as the law
        of R given V.
    imp : ImputationFit or DiscreteCovariateLaw
        Law of L given V.
    mode : {"mc", "exact", "quadrature"}
        ``"mc"`` averages ``mc_draws`` joint draws of (R, L, Y) per row from
        a generator seeded by ``seed``. ``"exact"`` enumerates every
        ``(R, L, Y)`` outcome of a finite-support law. ``"quadrature"`` uses
        the closed forms ``E[grad M | V] = -grad m`` and
        ``E[M^2 | V] = m(1-m)/pi + Var(mu | V)/(1-pi)``.
    """
    if outcome.family != LOGISTIC:
        raise FitError("h_opt_binary needs the logistic-binary outcome family")
    single = isinstance(v, Record) or (isinstance(v, Mapping) and all(np.ndim(x) == 0 for x in v.values()))
    cols, n = _columns(v)
    x = design_matrix(outcome.terms, cols, n)
    k = x.shape[1]
    bv, bl = outcome.beta[:k], outcome.beta[k:]
    pi = _pi(prop, cols, n)
    w1, w0 = 1.0 / pi, 1.0 / (1.0 - pi)
    m, grad_m, e_mu2 = _mu_moments(outcome, imp, x, cols, n, nodes)

    if mode == "quadrature":
        den = m * (1 - m) / pi + np.maximum(e_mu2 - m ** 2, 0.0) / (1 - pi)
        out = _finish(-grad_m, den)
    elif mode == "exact":
        if not isinstance(imp, DiscreteCovariateLaw):
            raise ValueError("exact mode needs a finite-support covariate law")
        s, pr = imp.table(cols, n)
        num = np.zeros((n, outcome.beta.size))
        den = np.zeros(n)
        for j in range(s.shape[0]):
            mu = kernels.expit(x @ bv + s[j] @ bl)
            grad_mu = np.hstack([x, np.broadcast_to(s[j], (n, s.shape[1]))]) * (mu * (1 - mu))[:, None]
            for r in (0.0, 1.0):
                p_r = pi if r else 1 - pi
                for y in (0.0, 1.0):
                    p_y = mu if y else 1 - mu
                    prob = pr[:, j] * p_r * p_y
                    mval = r * w1 * (y - m) + (1 - r) * w0 * (m - mu)
                    gval = -(r * w1)[:, None] * grad_m + ((1 - r) * w0)[:, None] * (grad_m - grad_mu)
                    num += prob[:, None] * gval
                    den += prob * mval ** 2
        out = _finish(num, den)
    elif mode == "mc":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed)])))
        num = np.empty((n, outcome.beta.size))
        den = np.empty(n)
        for lo in range(0, n, chunk):
            sl = slice(lo, min(n, lo + chunk))
            sub = {c: a[sl] for c, a in cols.items()}
            b = sl.stop - sl.start
            ldraw = _sample_l(imp, sub, b, mc_draws, rng)  # (b, D, p)
            lin = (x[sl] @ bv)[:, None] + ldraw @ bl
            mu = kernels.expit(lin)
            y = (rng.random((b, mc_draws)) < mu).astype(float)
            r = (rng.random((b, mc_draws)) < pi[sl, None]).astype(float)
            a1 = r * w1[sl, None]
            a0 = (1 - r) * w0[sl, None]
            mval = a1 * (y - m[sl, None]) + a0 * (m[sl, None] - mu)
            den[sl] = np.mean(mval ** 2, axis=1)
            dmu = mu * (1 - mu)
            gm = grad_m[sl]
            # grad M = -(a1 - a0) grad m - a0 grad mu, grad mu = dmu * (x, L)
            coef = np.mean(a1 - a0, axis=1)
            g_x = x[sl] * np.mean(a0 * dmu, axis=1)[:, None]
            g_l = np.einsum("bd,bdp->bp", a0 * dmu, ldraw) / mc_draws
            num[sl] = -coef[:, None] * gm - np.hstack([g_x, g_l])
        out = _finish(num, den)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out[0] if single else out


@dataclass
class EfficientWeights:
    """Fitted efficient index: an ``h(V)`` evaluator or a basis combination."""

    family: str
    outcome: OutcomeModel
    prop: PropensityFit | None = None
    imp: ImputationFit | DiscreteCovariateLaw | None = None
    mode: str = "quadrature"
    mc_draws: int = 4096
    seed: int = 0
    tau: TauResult | None = None
    info: dict = field(default_factory=dict)

    def h(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        return h_opt_binary(columns, self.outcome, self.prop, self.imp, self.mc_draws, self.seed, self.mode)

    def gspec(self) -> GSpec:
        if self.family == LOGISTIC:
            return GSpec(kind="y-times-gv", g_fn=self.h, n_basis=self.outcome.beta.size)
        return self.tau.gspec()


def efficient_weights(ds: FusedDataset, config: EstimatorConfig, basis: BasisSpec | None = None,
                      mode: str = "quadrature", mc_draws: int = 4096, seed: int = 0) -> tuple[EfficientWeights, tuple]:
    """Estimate efficient weights from a preliminary DR fit with ``config.g``.

    Returns ``(weights, (preliminary fit, prop, imp))``.
    """
    if config.kind is not EstimatorKind.DR:
        raise ValueError("efficient weighting applies to the DR estimator")
    fit0, prop, imp = fit_point(ds, config)
    outcome = fit0.outcome
    if config.family == LOGISTIC:
        w = EfficientWeights(LOGISTIC, outcome, prop, imp, mode, mc_draws, seed)
        return w, (fit0, prop, imp)
    sigma_y = estimate_sigma_y(outcome, imp, ds)
    outcome = OutcomeModel(LINEAR, outcome.terms, outcome.beta, sigma_y)
    spec = basis or BasisSpec.from_data(ds, dim_beta=outcome.beta.size)
    tr = tau_opt(ds, spec, outcome.beta, prop, imp, outcome)
    w = EfficientWeights(LINEAR, outcome, prop, imp, tau=tr, info={"sigma_y": sigma_y, "K": spec.K})
    return w, (fit0, prop, imp)


def efficient_fit(ds: FusedDataset, config: EstimatorConfig, basis: BasisSpec | None = None,
                  mode: str = "quadrature", mc_draws: int = 4096, seed: int = 0
                  ) -> tuple[FitResult, PropensityFit, ImputationFit]:
    """DR point estimate with efficient weights held fixed at their plug-in values."""
    w, (fit0, prop, imp) = efficient_weights(ds, config, basis, mode, mc_draws, seed)
    fit = solve(ds, EstimatorKind.DR, w.gspec(), w.outcome, prop, imp, init=fit0.theta)
    fit.diagnostics["efficient"] = {"family": w.family, "preliminary": fit0.theta.tolist(), **w.info}
    return fit, prop, imp
