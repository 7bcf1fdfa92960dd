"""Monte Carlo study of the IPW, IMP and DR estimators.

Data-generating process, with ``V = (A, C)``::

    C ~ N(0, 0.5^2)
    A | C ~ N(lambda0 + lambda1 C, sigma_A^2)
    L | V ~ N(alpha0 + alpha1 A + alpha2 C + alpha3 A C, sigma_L^2)
    R | V ~ Bernoulli(expit(eta0 + eta1 A + eta2 C))
    Y | V, L ~ N(beta0 + beta1 A + beta2 C + beta3 L, sigma_Y^2)

Y is then dropped where ``R = 0`` and L where ``R = 1``. Scenarios (i)-(iv)
fit the data-source model with or without C and the covariate model with
the true regressors or with ``(1, C, C^2)``.

Every replicate draws from its own Philox stream keyed by
``(seed, n, replicate)``. The key deliberately excludes the scenario and the
DGP constants, so scenarios and parameter variants are compared on common
random numbers.
"""
from __future__ import annotations

import csv
import enum
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .data import ColumnSchema, FusedDataset
from .errors import FusionError
from .estimating import EstimatorConfig, EstimatorKind, GSpec, WeakIdentificationWarning, solve
from .inference import sandwich_covariance, z_value
from .nuisance import LINEAR, LOGISTIC, OutcomeModel, fit_imputation, fit_propensity

SCHEMA = ColumnSchema(v_names=("A", "C"), l_names=("L",), y_name="Y", r_name="R", intercept=True)
OUTCOME_TERMS = ("1", "A", "C")
G_TERMS = ("1", "A", "C", "A:C")
PROPENSITY_TERMS = ("1", "A", "C")
PROPENSITY_TERMS_WRONG = ("1", "A")
IMPUTATION_TERMS = ("1", "A", "C", "A:C")
IMPUTATION_TERMS_WRONG = ("1", "C", "C^2")
ESTIMATORS = (EstimatorKind.IPW, EstimatorKind.IMP, EstimatorKind.DR)


@dataclass(frozen=True)
class DgpParams:
    lam: tuple[float, float, float] = (0.5, 0.5, 0.3)
    alpha_gen: tuple[float, float, float, float, float] = (-0.5, 1.5, 1.0, 2.0, 0.3)
    beta_gen: tuple[float, float, float, float, float] = (0.5, -0.5, 1.0, 1.5, 0.4)
    eta_gen: tuple[float, float, float] = (0.5, -0.75, -0.75)
    # "linear": eta0 + eta1 A + eta2 C; "literal": eta0 + eta1 A - eta2 C
    propensity_form: str = "linear"
    family: str = LINEAR

    def __post_init__(self):
        if min(self.lam[2], self.alpha_gen[4]) <= 0:
            raise ValueError("standard deviations must be positive")
        if self.family == LINEAR and self.beta_gen[4] <= 0:
            raise ValueError("sigma_Y must be positive")
        if self.propensity_form not in ("linear", "literal"):
            raise ValueError(f"unknown propensity form {self.propensity_form!r}")

    def with_alpha3(self, alpha3: float) -> "DgpParams":
        a = list(self.alpha_gen)
        a[3] = alpha3
        return replace(self, alpha_gen=tuple(a))

    @property
    def beta_true(self) -> np.ndarray:
        return np.array(self.beta_gen[:4])

    def linear_predictor(self, a, c):
        e0, e1, e2 = self.eta_gen
        return e0 + e1 * a + (e2 if self.propensity_form == "linear" else -e2) * c


class Scenario(str, enum.Enum):
    I = "i"
    II = "ii"
    III = "iii"
    IV = "iv"

    @property
    def propensity_terms(self) -> tuple[str, ...]:
        return PROPENSITY_TERMS_WRONG if self in (Scenario.II, Scenario.IV) else PROPENSITY_TERMS

    @property
    def imputation_terms(self) -> tuple[str, ...]:
        return IMPUTATION_TERMS_WRONG if self in (Scenario.III, Scenario.IV) else IMPUTATION_TERMS


def replicate_stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def generate_dataset(p: DgpParams, n: int, seed, eta=None) -> FusedDataset:
    """Draw one fused dataset. ``seed`` is an int or a ``numpy`` Generator.

    ``eta`` overrides ``p.eta_gen`` when given.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if eta is not None:
        p = replace(p, eta_gen=tuple(eta))
    rng = seed if isinstance(seed, np.random.Generator) else replicate_stream(seed)
    lam0, lam1, sd_a = p.lam
    a0, a1, a2, a3, sd_l = p.alpha_gen
    b0, b1, b2, b3, sd_y = p.beta_gen
    c = rng.normal(0.0, 0.5, n)
    a = lam0 + lam1 * c + sd_a * rng.normal(size=n)
    l = a0 + a1 * a + a2 * c + a3 * a * c + sd_l * rng.normal(size=n)
    r = (rng.uniform(size=n) < kernels.expit(p.linear_predictor(a, c))).astype(int)
    lin = b0 + b1 * a + b2 * c + b3 * l
    if p.family == LINEAR:
        y = lin + sd_y * rng.normal(size=n)
    else:
        y = (rng.uniform(size=n) < kernels.expit(lin)).astype(float)
    return FusedDataset.from_full(SCHEMA, r, np.column_stack([a, c]), y, l)


# -- one replicate -------------------------------------------------------------

@dataclass
class ReplicateOutcome:
    estimates: dict[str, np.ndarray]
    std_errors: dict[str, np.ndarray]
    failures: dict[str, str]


def run_replicate(
    params: DgpParams,
    scenario: Scenario,
    n: int,
    seed: int,
    rep: int,
    estimators: Sequence[EstimatorKind] = ESTIMATORS,
) -> ReplicateOutcome:
    ds = generate_dataset(params, n, replicate_stream(seed, n, rep))
    return fit_replicate(ds, scenario, estimators, params.family)


def fit_replicate(ds, scenario: Scenario, estimators=ESTIMATORS, family: str = LINEAR) -> ReplicateOutcome:
    scenario = Scenario(scenario)
    g = GSpec("y-times-gv", G_TERMS)
    outcome = OutcomeModel(family, OUTCOME_TERMS, np.zeros(4))
    est, se, fail = {}, {}, {}
    prop = imp = None
    try:
        prop = fit_propensity(ds, scenario.propensity_terms)
    except FusionError as exc:
        prop_err = exc
    try:
        imp = fit_imputation(ds, scenario.imputation_terms)
    except FusionError as exc:
        imp_err = exc
    for kind in estimators:
        kind = EstimatorKind(kind)
        name = kind.value
        if kind.needs_propensity and prop is None:
            fail[name] = f"propensity: {prop_err}"
            continue
        if kind.needs_imputation and imp is None:
            fail[name] = f"imputation: {imp_err}"
            continue
        try:
            fit = solve(ds, kind, g, outcome, prop, imp)
            _, cov = sandwich_covariance(ds, fit, prop, imp)
        except FusionError as exc:
            fail[name] = f"{type(exc).__name__}: {exc}"
            continue
        est[name] = fit.theta
        se[name] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return ReplicateOutcome(est, se, fail)


# -- report --------------------------------------------------------------------

COEF_NAMES = ("beta0", "beta1", "beta2", "beta3")


@dataclass
class EstimatorSummary:
    estimator: str
    estimates: np.ndarray  # (reps_ok, 4)
    std_errors: np.ndarray  # (reps_ok, 4)
    replicate_ids: np.ndarray
    truth: np.ndarray
    level: float = 0.95

    @property
    def reps(self) -> int:
        return self.estimates.shape[0]

    @property
    def bias(self) -> np.ndarray:
        return self.estimates.mean(axis=0) - self.truth

    @property
    def mc_sd(self) -> np.ndarray:
        """Monte Carlo SD; NaN when fewer than two replicates succeeded."""
        if self.reps < 2:
            return np.full(self.truth.size, np.nan)
        return self.estimates.std(axis=0, ddof=1)

    @property
    def mc_se_mean(self) -> np.ndarray:
        return self.mc_sd / np.sqrt(self.reps)

    @property
    def mean_se(self) -> np.ndarray:
        return self.std_errors.mean(axis=0)

    @property
    def sd_ratio(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.mean_se / self.mc_sd

    @property
    def covered(self) -> np.ndarray:
        z = z_value(self.level)
        return np.abs(self.estimates - self.truth) <= z * self.std_errors

    @property
    def coverage(self) -> np.ndarray:
        return self.covered.mean(axis=0)


@dataclass
class SimulationReport:
    scenario: str
    n: int
    reps: int
    seed: int
    params: DgpParams
    summaries: dict[str, EstimatorSummary]
    failures: dict[str, int]
    failure_messages: list[tuple[int, str, str]] = field(default_factory=list)

    def metric_rows(self) -> list[dict]:
        rows = []
        for name, s in self.summaries.items():
            for j, coef in enumerate(COEF_NAMES):
                rows.append({
                    "scenario": self.scenario,
                    "n": self.n,
                    "alpha3": self.params.alpha_gen[3],
                    "estimator": name,
                    "coefficient": coef,
                    "truth": float(s.truth[j]),
                    "reps": s.reps,
                    "failures": self.failures.get(name, 0),
                    "bias": float(s.bias[j]),
                    "mc_sd": float(s.mc_sd[j]),
                    "mean_est_sd": float(s.mean_se[j]),
                    "sd_ratio": float(s.sd_ratio[j]),
                    "coverage": float(s.coverage[j]),
                })
        return rows

    def to_document(self) -> dict:
        return {
            "kind": "simulation",
            "scenario": self.scenario,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "params": asdict(self.params),
            "failures": self.failures,
            "metrics": self.metric_rows(),
        }


def _worker_count(workers: int | None) -> int:
    cap = os.environ.get("FUSEREG_THREADS")
    w = workers if workers is not None else (os.cpu_count() or 1)
    if cap:
        w = min(w, max(1, int(cap)))
    return max(1, w)


def _run_one(args):
    params, scenario, n, seed, rep, estimators = args
    return run_replicate(params, scenario, n, seed, rep, estimators)


def run_scenario(
    s,
    n: int,
    reps: int,
    seed: int,
    alpha3: float | None = None,
    estimators: Sequence = ESTIMATORS,
    params: DgpParams | None = None,
    workers: int | None = None,
) -> SimulationReport:
    """Run ``reps`` replicates of one scenario and aggregate coverage/SD metrics.

    Replicates whose fit fails are excluded from the metrics and counted.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    scenario = Scenario(s)
    params = params or DgpParams()
    if alpha3 is not None:
        params = params.with_alpha3(alpha3)
    estimators = tuple(EstimatorKind(e) for e in estimators)
    jobs = [(params, scenario, n, seed, rep, estimators) for rep in range(reps)]
    nw = _worker_count(workers)
    if nw > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            outcomes = list(pool.map(_run_one, jobs, chunksize=max(1, reps // (4 * nw))))
    else:
        outcomes = [_run_one(j) for j in jobs]
    return aggregate(scenario.value, n, reps, seed, params, estimators, outcomes)


def aggregate(scenario, n, reps, seed, params, estimators, outcomes) -> SimulationReport:
    truth = params.beta_true
    summaries, failures, messages = {}, {}, []
    for kind in estimators:
        name = EstimatorKind(kind).value
        ids, est, se = [], [], []
        for rep, out in enumerate(outcomes):
            if name in out.estimates:
                ids.append(rep)
                est.append(out.estimates[name])
                se.append(out.std_errors[name])
            else:
                messages.append((rep, name, out.failures.get(name, "not run")))
        failures[name] = reps - len(ids)
        summaries[name] = EstimatorSummary(
            name, np.array(est).reshape(-1, truth.size), np.array(se).reshape(-1, truth.size), np.array(ids), truth
        )
    return SimulationReport(scenario, n, reps, seed, params, summaries, failures, messages)


# -- exports -------------------------------------------------------------------

BOXPLOT_FIELDS = ("scenario", "n", "estimator", "coefficient", "replicate", "estimate")
METRIC_FIELDS = ("scenario", "n", "alpha3", "estimator", "coefficient", "truth", "reps", "failures",
                 "bias", "mc_sd", "mean_est_sd", "sd_ratio", "coverage")


def boxplot_rows(report: SimulationReport) -> Iterable[dict]:
    for name, s in report.summaries.items():
        for j, coef in enumerate(COEF_NAMES):
            for rep, value in zip(s.replicate_ids, s.estimates[:, j]):
                yield {"scenario": report.scenario, "n": report.n, "estimator": name,
                       "coefficient": coef, "replicate": int(rep), "estimate": repr(float(value))}


def export_boxplot_data(reports, path) -> Path:
    """Tidy CSV of replicate-level estimates, one row per (estimator, coefficient, replicate)."""
    if isinstance(reports, SimulationReport):
        reports = [reports]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BOXPLOT_FIELDS)
        w.writeheader()
        for rep in reports:
            w.writerows(boxplot_rows(rep))
    return path


def export_metrics(reports, path) -> Path:
    if isinstance(reports, SimulationReport):
        reports = [reports]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for rep in reports:
            for row in rep.metric_rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def export_report_document(reports, path) -> Path:
    if isinstance(reports, SimulationReport):
        reports = [reports]
    path = Path(path)
    doc = {"kind": "simulation-grid", "reports": [r.to_document() for r in reports]}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


# -- binary-outcome efficiency study ---------------------------------------------

@dataclass
class EfficiencyStudy:
    """Paired DR estimates with the default and the efficient index function."""

    n: int
    reps: int
    seed: int
    default: np.ndarray  # (reps_ok, 4)
    efficient: np.ndarray  # (reps_ok, 4)
    failures: int

    def variances(self) -> tuple[np.ndarray, np.ndarray]:
        return self.default.var(axis=0, ddof=1), self.efficient.var(axis=0, ddof=1)

    def variance_difference_se(self, n_boot: int = 2000, seed: int = 0) -> np.ndarray:
        """Bootstrap SE (over replicates, paired) of ``var(efficient) - var(default)``."""
        rng = replicate_stream(seed, 0)
        k = self.default.shape[0]
        out = np.empty((n_boot, self.default.shape[1]))
        for b in range(n_boot):
            idx = rng.integers(0, k, k)
            out[b] = self.efficient[idx].var(axis=0, ddof=1) - self.default[idx].var(axis=0, ddof=1)
        return out.std(axis=0, ddof=1)


def _efficiency_one(args):
    from .efficiency import efficient_fit

    params, n, seed, rep, mode = args
    ds = generate_dataset(params, n, replicate_stream(seed, n, rep))
    cfg = EstimatorConfig(EstimatorKind.DR, OUTCOME_TERMS, GSpec("y-times-gv", G_TERMS),
                          PROPENSITY_TERMS, IMPUTATION_TERMS, family=params.family)
    try:
        with warnings.catch_warnings():
            # h(V) is small in absolute scale, so the absolute weak-identification
            # threshold would flag every replicate
            warnings.simplefilter("ignore", WeakIdentificationWarning)
            fit, _, _ = efficient_fit(ds, cfg, mode=mode, seed=rep)
    except FusionError:
        return None
    return np.asarray(fit.diagnostics["efficient"]["preliminary"]), fit.theta


def run_efficiency_study(n: int, reps: int, seed: int, params: DgpParams | None = None,
                         mode: str = "quadrature", workers: int | None = None) -> EfficiencyStudy:
    """Scenario (i) with a binary outcome: default-g DR versus h-weighted DR."""
    params = params or DgpParams(family=LOGISTIC)
    if params.family != LOGISTIC:
        raise ValueError("the efficiency study uses the logistic-binary family")
    jobs = [(params, n, seed, rep, mode) for rep in range(reps)]
    nw = _worker_count(workers)
    if nw > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            outs = list(pool.map(_efficiency_one, jobs, chunksize=max(1, reps // (4 * nw))))
    else:
        outs = [_efficiency_one(j) for j in jobs]
    ok = [o for o in outs if o is not None]
    return EfficiencyStudy(n, reps, seed, np.array([o[0] for o in ok]).reshape(-1, 4),
                           np.array([o[1] for o in ok]).reshape(-1, 4), reps - len(ok))
