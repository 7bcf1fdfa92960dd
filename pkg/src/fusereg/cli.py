"""Command-line front end.

Commands
--------
``fusereg fit --config CFG [--pool] DATA.csv [DATA.csv ...]``
    Fit every requested estimator on every file and write one result
    document per (file, estimator); with several files and ``--pool`` (or
    ``pool: true`` in the config) the replicate fits are pooled.
``fusereg simulate --config CFG``
    Run the Monte Carlo grid and write a metric CSV, a boxplot CSV and a
    JSON report.
``fusereg pool RESULT.json [RESULT.json ...]``
    Pool result documents.

Exit codes: 0 success, 1 input or configuration error, 2 fitting failure,
3 inference failure.

Configuration is one YAML or JSON file; command-line flags override it.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .data import ColumnSchema, load_fused_csv
from .errors import FitError, FusionError, InferenceError, InputError, LayoutMismatch
from .estimating import EstimatorConfig, EstimatorKind, GSpec
from .formula import parse_term
from .inference import (
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
)
from .nuisance import FAMILIES, LINEAR

EXIT_OK, EXIT_INPUT, EXIT_FIT, EXIT_INFERENCE = 0, 1, 2, 3

DEFAULTS = {
    "family": LINEAR,
    "estimators": ["DR"],
    "level": 0.95,
    "bootstrap": 0,
    "seed": 0,
    "pool": False,
    "efficient": False,
    "basis": {"family": "polynomial", "K": None},
    "out": ".",
}

SIM_DEFAULTS = {
    "scenarios": ["i", "ii", "iii", "iv"],
    "n": [2000],
    "reps": 500,
    "alpha3": [2.0],
    "estimators": ["IPW", "IMP", "DR"],
    "propensity_form": "linear",
    "seed": 0,
    "workers": None,
    "out": ".",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def load_config(path: str | None) -> dict:
    """Read a YAML or JSON config; a missing path gives an empty config."""
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise InputError(f"cannot parse config {path}: {exc}") from None
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise InputError("config must be a mapping")
    return cfg


def _terms(cfg: dict, key: str, required: bool) -> tuple[str, ...] | None:
    formulas = cfg.get("formulas", {})
    v = formulas.get(key)
    if v is None:
        if required:
            raise InputError(f"config needs formulas.{key}")
        return None
    if isinstance(v, str):
        v = [t.strip() for t in v.split("+")]
    return tuple(str(t) for t in v)


def _check_terms(terms, schema: ColumnSchema, what: str) -> None:
    if terms is None:
        return
    for t in terms:
        try:
            cols = parse_term(t)
        except ValueError as exc:
            raise InputError(f"{what}: {exc}") from None
        for c in cols:
            if c not in schema.v_names:
                raise InputError(f"{what} term {t!r} uses column {c!r}, which is not a V column")


def build_configs(cfg: dict) -> tuple[ColumnSchema, list[EstimatorConfig]]:
    """Schema and one estimator config per requested estimator."""
    if "schema" not in cfg:
        raise InputError("config needs a schema section")
    schema = ColumnSchema.from_dict(cfg["schema"])
    family = cfg.get("family", DEFAULTS["family"])
    if family not in FAMILIES:
        raise InputError(f"unknown family {family!r}; expected one of {FAMILIES}")
    outcome = _terms(cfg, "outcome", True)
    g_terms = _terms(cfg, "g", False) or ("1",) + tuple(schema.v_names)
    prop = _terms(cfg, "propensity", False)
    imp = _terms(cfg, "imputation", False)
    for what, t in (("outcome", outcome), ("g", g_terms), ("propensity", prop), ("imputation", imp)):
        _check_terms(t, schema, f"formulas.{what}")
    names = cfg.get("estimators", cfg.get("estimator", DEFAULTS["estimators"]))
    if isinstance(names, str):
        names = [names]
    configs = []
    for name in names:
        try:
            kind = EstimatorKind(str(name).upper())
        except ValueError:
            raise InputError(f"unknown estimator {name!r}") from None
        if kind.needs_propensity and prop is None:
            raise InputError(f"{kind.value} needs formulas.propensity")
        if kind.needs_imputation and imp is None:
            raise InputError(f"{kind.value} needs formulas.imputation")
        configs.append(EstimatorConfig(kind, outcome, GSpec("y-times-gv", g_terms),
                                       prop if kind.needs_propensity else None,
                                       imp if kind.needs_imputation else None, family))
    return schema, configs


def _efficient(ds, config: EstimatorConfig, cfg: dict, level: float, seed: int):
    from .efficiency import BasisSpec, efficient_fit

    basis_cfg = {**DEFAULTS["basis"], **(cfg.get("basis") or {})}
    basis = None
    if config.family == LINEAR:
        basis = BasisSpec.from_data(ds, basis_cfg["family"], basis_cfg["K"],
                                    dim_beta=len(config.outcome_terms) + ds.schema.p)
    fit, prop, imp = efficient_fit(ds, config, basis, seed=seed)
    sigma, cov = sandwich_covariance(ds, fit, prop, imp)
    fit.asymptotic_covariance, fit.covariance = sigma, cov
    fit.wald_intervals = wald_ci(fit, level)
    fit.diagnostics["level"] = level
    return fit


def _fit_one(ds, config: EstimatorConfig, cfg: dict):
    level = float(cfg["level"])
    seed = int(cfg["seed"])
    if cfg.get("efficient") and config.kind is EstimatorKind.DR:
        fit = _efficient(ds, config, cfg, level, seed)
    else:
        fit, _, _ = fit_with_inference(ds, config, level)
    b = int(cfg.get("bootstrap") or 0)
    if 0 < b < 50:
        raise InputError("bootstrap needs at least 50 resamples")
    if b:
        boot = bootstrap_covariance(ds, config, b, seed)
        fit.diagnostics["bootstrap"] = {
            "B": b,
            "failures": boot.failures,
            "std_errors": np.sqrt(np.diag(boot.covariance)).tolist(),
        }
    return fit


def _merge(cfg: dict, defaults: dict, section: str | None = None) -> dict:
    base = dict(defaults)
    base.update({k: v for k, v in cfg.items() if k in defaults})
    if section and isinstance(cfg.get(section), dict):
        base.update(cfg[section])
    return base


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    settings = _merge(cfg, DEFAULTS)
    for key in ("seed", "out", "level", "bootstrap"):
        if getattr(args, key, None) is not None:
            settings[key] = getattr(args, key)
    if args.pool:
        settings["pool"] = True
    if args.efficient:
        settings["efficient"] = True
    if args.estimator:
        cfg = {**cfg, "estimators": args.estimator}
    schema, configs = build_configs(cfg)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    datasets = [(Path(p), load_fused_csv(p, schema)) for p in args.data]
    if not datasets:
        raise InputError("no data files given")
    written = []
    for config in configs:
        fits = []
        for path, ds in datasets:
            fit = _fit_one(ds, config, settings)
            fits.append(fit)
            target = out / f"fit_{path.stem}_{config.kind.value}.json"
            write_document(result_document(fit), target)
            written.append(target)
        if settings["pool"] and len(fits) > 1:
            pooled = rubin_pool(fits, float(settings["level"]))
            target = out / f"pooled_{config.kind.value}.json"
            write_document(pooled_document(pooled), target)
            written.append(target)
    for w in written:
        print(w)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulation import (
        DgpParams,
        export_boxplot_data,
        export_metrics,
        export_report_document,
        run_scenario,
    )

    cfg = load_config(args.config)
    settings = _merge(cfg, SIM_DEFAULTS, "simulate")
    for key in ("seed", "out", "reps"):
        if getattr(args, key, None) is not None:
            settings[key] = getattr(args, key)
    if args.n:
        settings["n"] = args.n
    if args.scenario:
        settings["scenarios"] = args.scenario
    if args.alpha3:
        settings["alpha3"] = args.alpha3
    as_list = lambda v: v if isinstance(v, (list, tuple)) else [v]  # noqa: E731
    try:
        params = DgpParams(propensity_form=settings["propensity_form"])
        reps = int(settings["reps"])
        if reps < 1:
            raise ValueError("reps must be at least 1")
        grid = [(str(s), int(n), float(a)) for a in as_list(settings["alpha3"])
                for s in as_list(settings["scenarios"]) for n in as_list(settings["n"])]
        estimators = tuple(EstimatorKind(str(e).upper()) for e in as_list(settings["estimators"]))
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad simulate settings: {exc}") from None
    reports = []
    for s, n, a3 in grid:
        try:
            rep = run_scenario(s, n, reps, int(settings["seed"]), a3, estimators, params, settings["workers"])
        except ValueError as exc:
            raise InputError(str(exc)) from None
        reports.append(rep)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    for target in (
        export_metrics(reports, out / "simulation_metrics.csv"),
        export_boxplot_data(reports, out / "simulation_boxplot.csv"),
        export_report_document(reports, out / "simulation_report.json"),
    ):
        print(target)
    return EXIT_OK


def cmd_pool(args) -> int:
    cfg = load_config(args.config)
    level = args.level if args.level is not None else float(cfg.get("level", 0.95))
    out = Path(args.out if args.out is not None else cfg.get("out", "."))
    fits = []
    for p in args.results:
        try:
            doc = read_document(p)
        except OSError as exc:
            raise InputError(f"cannot read {p}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{p} is not JSON: {exc}") from None
        if doc.get("kind") != "fit":
            raise LayoutMismatch(f"{p} is not a fit result document")
        fits.append(fit_from_document(doc))
    pooled = rubin_pool(fits, level)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "pooled.json"
    write_document(pooled_document(pooled), target)
    print(target)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusereg", description="Regression on fused data sources.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, help="seed for every random choice")
        p.add_argument("--out", help="output directory")

    f = sub.add_parser("fit", help="fit estimators on fused CSV files")
    common(f)
    f.add_argument("data", nargs="+", help="fused CSV files (several files are treated as replicates)")
    f.add_argument("--estimator", action="append", help="IPW, IMP or DR (repeatable)")
    f.add_argument("--pool", action="store_true", help="pool replicate fits with Rubin's rules")
    f.add_argument("--efficient", action="store_true", help="use locally efficient weights for DR")
    f.add_argument("--level", type=float, help="confidence level")
    f.add_argument("--bootstrap", type=int, help="number of bootstrap resamples (0 = none)")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run the Monte Carlo study")
    common(s)
    s.add_argument("--reps", type=int)
    s.add_argument("--n", type=int, action="append")
    s.add_argument("--scenario", action="append", choices=["i", "ii", "iii", "iv"])
    s.add_argument("--alpha3", type=float, action="append")
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("pool", help="pool result documents")
    common(q)
    q.add_argument("results", nargs="+", help="result documents from `fit`")
    q.add_argument("--level", type=float)
    q.set_defaults(func=cmd_pool)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, InputError):
        return EXIT_INPUT
    if isinstance(exc, FitError):
        return EXIT_FIT
    if isinstance(exc, InferenceError):
        return EXIT_INFERENCE
    return EXIT_FIT


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
