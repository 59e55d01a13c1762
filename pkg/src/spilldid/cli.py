"""Command-line front end: the estimation pipeline and the simulation lab.

``spilldid estimate`` runs the five-step pipeline on a delimited data file:
load, exposure construction, nuisance declaration, stacked-moment solving,
and robust inference, emitting a human-readable and a machine-readable
report. ``spilldid simulate`` drives the replication designs.

Exit codes: 0 success, 1 configuration/validation error, 2 estimation
failure, 3 inference failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import yaml

from . import __version__, estimators, gmm, inference, simlab
from .design import Formula, ModelData
from .errors import (AssemblyError, ConditioningError, ConfigError,
                     ConvergenceError, DataValidationError, DegenerateArmError,
                     InferenceError, OverlapError, RankError, SchemaError,
                     SpillDidError)
from .exposure import ExposureSpec, compute_exposure
from .nuisance import (NuisanceSpec, NuisanceValues, fit_cbps, fit_logit_g,
                       fit_logit_w, fit_outcome_regressions,
                       overlap_diagnostics, predict_p)
from .population import ColumnSchema, build_adjacency, load_population

_VALIDATION_ERRORS = (ConfigError, SchemaError, DataValidationError)
_ESTIMATION_ERRORS = (OverlapError, RankError, ConvergenceError,
                      DegenerateArmError, AssemblyError)
_INFERENCE_ERRORS = (InferenceError, ConditioningError)

_TARGETS = ("canonical_twfe", "abadie_ipw", "augmented_twfe", "saturated_twfe",
            "ipw_datt", "ra_datt", "dr_datt", "dr_spillover", "overall_direct",
            "pretrend_placebo")


def _load_config(path) -> dict:
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} is not a mapping")
    return cfg


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(canon).hexdigest()[:16]


def _require(cfg: dict, key: str, where: str = "config"):
    if key not in cfg:
        raise ConfigError(f"{where} is missing required key {key!r}")
    return cfg[key]


def _build_schema(data_cfg: dict) -> ColumnSchema:
    sc = _require(data_cfg, "schema", "data section")
    return ColumnSchema(
        id=_require(sc, "id", "schema"),
        coords=tuple(_require(sc, "coords", "schema")),
        z=tuple(_require(sc, "z", "schema")),
        w=_require(sc, "w", "schema"),
        y1=_require(sc, "y1", "schema"),
        y2=_require(sc, "y2", "schema"),
        cluster=sc.get("cluster"),
        y0=sc.get("y0"))


def _build_exposure_spec(cfg: dict, adjacency) -> ExposureSpec:
    kind = _require(cfg, "kind", "exposure section")
    bins = tuple(tuple(b) for b in cfg.get("bins", ()))
    return ExposureSpec(kind=kind, adjacency=adjacency, bins=bins,
                        cluster_mean=cfg.get("cluster_mean", "cluster"))


def _build_kernels(inf_cfg: list) -> list[dict]:
    methods = []
    for item in inf_cfg:
        kind = _require(item, "kind", "inference method")
        if kind == "shac":
            methods.append({
                "kind": "shac",
                "kernel": inference.KernelSpec(
                    family=item.get("kernel", "bartlett"),
                    bandwidth=float(_require(item, "bandwidth", "shac method")),
                    binned=bool(item.get("binned", False))),
            })
        elif kind in ("ehw", "cluster"):
            methods.append({"kind": kind})
        else:
            raise ConfigError(f"unknown inference method {kind!r}")
    return methods


def _validate_estimands(est_cfg: list) -> list[dict]:
    if not est_cfg:
        raise ConfigError("no estimands requested")
    for item in est_cfg:
        target = _require(item, "target", "estimand")
        if target not in _TARGETS:
            raise ConfigError(f"unknown estimand target {target!r}; "
                              f"expected one of {_TARGETS}")
    return est_cfg


def run_pipeline(cfg: dict, out_dir: Path) -> dict:
    """Execute the pipeline for a validated config; returns the report dict."""
    data_cfg = _require(cfg, "data")
    schema = _build_schema(data_cfg)
    estimand_cfg = _validate_estimands(_require(cfg, "estimands"))
    models_cfg = _require(cfg, "models")
    inf_methods = _build_kernels(cfg.get("inference", [{"kind": "ehw"}]))
    level = float(cfg.get("confidence_level", 0.95))

    pop = load_population(_require(data_cfg, "path", "data section"), schema,
                          delimiter=data_cfg.get("delimiter", ","))
    adjacency = None
    adj_cfg = cfg.get("adjacency")
    if adj_cfg is not None:
        adjacency = build_adjacency(pop, float(_require(adj_cfg, "cutoff", "adjacency")),
                                    row_normalize=True,
                                    metric=adj_cfg.get("metric", "chebyshev"))
    exposure_spec = _build_exposure_spec(_require(cfg, "exposure"), adjacency)
    exposure = compute_exposure(pop, exposure_spec)

    md_full = ModelData.assemble(pop, exposure, adjacency)
    restrict = bool(cfg.get("restrict_to_eligible", True))
    md = md_full.restrict(exposure.eligible) if restrict else md_full
    sub_pop_n = md.n

    def formula(key, default=None):
        terms = models_cfg.get(key, default)
        if terms is None:
            raise ConfigError(f"models section is missing {key!r}")
        return Formula(tuple(terms))

    nspec = NuisanceSpec(
        formula_w=formula("w"),
        formula_g=formula("g"),
        formula_y1=formula("y1"),
        formula_y2=formula("y2"),
        ps_source=models_cfg.get("ps_source", "mle"),
        outcome_mode=models_cfg.get("outcome_mode", "pooled"))

    # nuisance fits shared by the plug-in estimators and diagnostics
    if nspec.ps_source == "cbps":
        fit_w, fit_g = fit_cbps(md, nspec.formula_w, nspec.formula_g)
    else:
        fit_w = fit_logit_w(md, nspec.formula_w)
        fit_g = fit_logit_g(md, nspec.formula_g)
    reg = fit_outcome_regressions(md, nspec.formula_y1, nspec.formula_y2,
                                  nspec.outcome_mode)
    values = NuisanceValues.from_fits(md, fit_w, fit_g, reg)
    diagnostics = overlap_diagnostics(values, md,
                                      floor=float(cfg.get("overlap_floor", 0.01)))

    rows = []
    warnings_log = list(diagnostics.warnings)

    def variance_entries(solution):
        out = {}
        for method in inf_methods:
            if method["kind"] == "shac":
                v = inference.shac_variance(solution, md.coords, method["kernel"])
                key = f"shac(b={method['kernel'].bandwidth})"
            elif method["kind"] == "ehw":
                v = inference.ehw_variance(solution)
                key = "ehw"
            else:
                v = inference.cluster_variance(solution, md.clusters)
                key = "cluster"
            if not v.psd:
                warnings_log.append(f"non-PSD middle matrix under {key}")
            out[key] = v
        return out

    for item in estimand_cfg:
        target = item["target"]
        row = {"target": target}
        if target == "canonical_twfe":
            est = estimators.canonical_twfe(md)
            row.update(estimate=est.value, interpretation=est.interpretation)
        elif target == "abadie_ipw":
            fit = fit_logit_w(md, formula("abadie_w", models_cfg.get("w")))
            est = estimators.abadie_ipw(md, predict_p(fit, md))
            row.update(estimate=est.value, interpretation=est.interpretation)
        elif target == "augmented_twfe":
            res = estimators.augmented_twfe(md, (md.g == md.level_set[-1]).astype(float))
            row.update(estimate=res.datt1, datt0=res.datt0, datt1=res.datt1,
                       beta=[res.beta1, res.beta2, res.beta3])
        elif target == "saturated_twfe":
            res = estimators.saturated_twfe(md, covariates=models_cfg.get("saturated_covariates", ()))
            row.update(estimate=res.datt[md.level_set[-1]],
                       datt={str(k): v for k, v in res.datt.items()},
                       coefficients=res.coefficients)
        elif target == "ra_datt":
            g = int(_require(item, "g", "ra_datt estimand"))
            est = estimators.ra_datt(md, values, g)
            row.update(estimate=est.value, g=g, interpretation=est.interpretation)
        elif target == "ipw_datt":
            g = int(_require(item, "g", "ipw_datt estimand"))
            est = estimators.ipw_datt(md, values, g,
                                      normalize=bool(item.get("normalize", True)))
            row.update(estimate=est.value, g=g, interpretation=est.interpretation)
        elif target == "overall_direct":
            shares = estimators.treated_level_shares(md)
            per_level = {g: estimators.dr_datt(md, values, g).value for g in md.level_set}
            est = estimators.aggregate_overall(per_level, shares)
            row.update(estimate=est.value, shares={str(k): v for k, v in shares.items()},
                       per_level={str(k): v for k, v in per_level.items()},
                       interpretation=est.interpretation)
        elif target == "pretrend_placebo":
            if md.y0 is None:
                raise ConfigError("pretrend_placebo needs a y0 column in the schema")
            g = int(_require(item, "g", "placebo estimand"))
            kernel = None
            for method in inf_methods:
                if method["kind"] == "shac":
                    kernel = method["kernel"]
            res = estimators.pretrend_placebo(md, md.y0, nspec, g, kernel=kernel)
            row.update(estimate=res.estimate, se=res.se, z=res.z, p_value=res.p_value, g=g)
        elif target in ("dr_datt", "dr_spillover"):
            if target == "dr_datt":
                g = int(_require(item, "g", "dr_datt estimand"))
                request = estimators.EstimandRequest(
                    "dr_datt", g=g, normalize=bool(item.get("normalize", True)),
                    ps_source=nspec.ps_source)
            else:
                request = estimators.EstimandRequest(
                    "dr_spillover", g=int(_require(item, "g", "spillover")),
                    g_prime=int(_require(item, "g_prime", "spillover")),
                    w_arm=int(_require(item, "w", "spillover")),
                    normalize=bool(item.get("normalize", True)),
                    ps_source=nspec.ps_source)
            system = gmm.assemble_moments(md, nspec, request)
            solution = gmm.solve_gmm(system)
            row.update(estimate=solution.tau,
                       g=request.g, g_prime=request.g_prime, w_arm=request.w_arm,
                       interpretation=estimators.INTERPRETATION_NOTE)
            ses, cis = {}, {}
            for key, v in variance_entries(solution).items():
                se = v.se_for("tau")
                ses[key] = se
                cis[key] = list(inference.confidence_interval(solution.tau, se, level))
            row.update(se=ses, ci=cis, moment_norm=solution.moment_norm)
        rows.append(row)

    report = {
        "version": __version__,
        "config_hash": _config_hash(cfg),
        "n_units": pop.n,
        "n_estimation": sub_pop_n,
        "confidence_level": level,
        "overlap": {"p_min": diagnostics.p_min, "p_max": diagnostics.p_max,
                    "pi_min": {f"w={w},g={g}": v for (w, g), v in diagnostics.pi_min.items()},
                    "cell_counts": {f"w={w},g={g}": c for (w, g), c in diagnostics.cell_counts.items()}},
        "warnings": warnings_log,
        "estimates": rows,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "estimates.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out_dir / "estimates.txt").write_text(_format_report(report))
    return report


def _format_report(report: dict) -> str:
    lines = [f"spilldid {report['version']}  config {report['config_hash']}",
             f"units {report['n_units']}  estimation sample {report['n_estimation']}",
             ""]
    for row in report["estimates"]:
        name = row["target"]
        extra = "".join(f" {k}={row[k]}" for k in ("g", "g_prime", "w_arm")
                        if row.get(k) is not None)
        lines.append(f"{name}{extra}: {row['estimate']:+.6f}")
        if isinstance(row.get("se"), dict):
            for key, se in row["se"].items():
                lo, hi = row["ci"][key]
                lines.append(f"    se[{key}] = {se:.6f}   "
                             f"{int(report['confidence_level'] * 100)}% CI [{lo:+.4f}, {hi:+.4f}]")
        elif row.get("se") is not None:
            lines.append(f"    se = {row['se']:.6f}  z = {row['z']:+.3f}  p = {row['p_value']:.4f}")
    if report["warnings"]:
        lines += ["", "warnings:"] + [f"  - {w}" for w in report["warnings"]]
    return "\n".join(lines) + "\n"


def _cmd_estimate(args) -> int:
    cfg = _load_config(args.config)
    if args.data:
        cfg.setdefault("data", {})["path"] = args.data
    report = run_pipeline(cfg, Path(args.out))
    print(_format_report(report))
    return 0


def _cmd_simulate(args) -> int:
    if args.reps < 1:
        raise ConfigError("--reps must be >= 1")
    spec = simlab.design_spec(args.design, seed=args.seed, n=args.n,
                              cutoff=args.cutoff, domain_side=args.side)
    suite = [s.strip() for s in args.suite.split(",") if s.strip()]
    summary = simlab.run_replications(spec, suite, args.reps, parallel=args.parallel)
    text = summary.table()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"design{args.design}_seed{args.seed}.txt").write_text(text + "\n")
        payload = {
            "design": args.design, "seed": args.seed, "reps": args.reps,
            "suite": suite, "version": __version__,
            "means": {k: summary.mean(k) for k in summary.names()},
            "sds": {k: summary.sd(k) for k in summary.names()},
            "failures": len(summary.failures),
        }
        (out / f"design{args.design}_seed{args.seed}.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spilldid",
        description="difference-in-differences estimation under neighborhood interference")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="run the estimation pipeline on a data file")
    est.add_argument("--config", required=True, help="YAML/JSON run configuration")
    est.add_argument("--data", help="override the data path from the config")
    est.add_argument("--out", default="spilldid-out", help="output directory")
    est.set_defaults(func=_cmd_estimate)

    sim = sub.add_parser("simulate", help="run a replication design")
    sim.add_argument("--design", required=True,
                     help="design id: 1-6, appendixE, appendixF-noSpill, appendixF-spill")
    sim.add_argument("--reps", type=int, required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--suite", default="dr_cbps",
                     help="comma-separated estimator suite entries")
    sim.add_argument("--n", type=int, default=None)
    sim.add_argument("--cutoff", type=float, default=0.3)
    sim.add_argument("--side", type=float, default=None)
    sim.add_argument("--parallel", type=int, default=1)
    sim.add_argument("--out", default=None)
    sim.set_defaults(func=_cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except _ESTIMATION_ERRORS as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 2
    except _INFERENCE_ERRORS as exc:
        print(f"inference error: {exc}", file=sys.stderr)
        return 3
    except SpillDidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
