"""Command-line interface: ``relmm {fit,predict,simulate,covcheck}``.

Settings come from an optional YAML file (``--config``) and are overridden
by flags.  Every command writes ``config.yaml`` to its output directory;
running the same command with that file reproduces the outputs exactly.

Exit codes: 0 success, 1 a theory check failed, 2 invalid input or
configuration, 3 numerical failure (including non-convergence), 4 the
requested estimator is infeasible on the data.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .completion import RandomEffectsSpec, build_completed_design
from .data import CovariateSpec, LongitudinalDataset, load_csv
from .engine import OptimizerOptions
from .errors import ConfigError, InfeasibleError, NumericalError, RelmmError, ValidationError
from .predictors import CCE, CCPE, CDOE, FLAG_NAIVE_SE, ebp, fit_observed, run_pipeline
from .simulation import (PRESET_M, SimConfig, apply_mdm, fmt6, format_table, generate_complete,
                         preset, run_monte_carlo)
from .theory import complete_record_rows, expansion_errors, sigma_cce, sigma_cdoe, sim_components

logger = logging.getLogger("relmm")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 1, 2, 3, 4

FIT_METHODS = (CDOE, CCE, CCPE)

DEFAULTS = {
    "seed": 20240101,
    "jobs": 1,
    "out": "relmm-out",
    "method": CCE,
    "optimizer": OptimizerOptions().as_dict(),
    "data": {"path": None, "na_token": "NA", "response": None,
             "covariates": {"intercept": True, "time_invariant": [], "time_varying": [],
                            "missable": []},
             "random_effects": {"intercept": True, "slopes": []}},
    "simulate": {"preset": "table1", "m": None, "n_sim": 1000, "settings": {}},
    "covcheck": {"source": "preset", "preset": "table1", "m": None, "n_designs": 10,
                 "mask": True, "settings": {}},
}


# ---------------------------------------------------------------- config

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(out[key], dict) and key != "settings" and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: Optional[str]) -> dict:
    """Defaults updated with the YAML file at ``path`` (if any)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    raw.pop("command", None)
    return _merge(cfg, raw)


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _name_list(text: str) -> list:
    return [v.strip() for v in str(text).split(",") if v.strip()]


def resolve(args: argparse.Namespace) -> dict:
    """Apply command-line overrides to the loaded config."""
    cfg = load_config(args.config)
    for key in ("seed", "jobs", "out"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.method is not None and args.command != "simulate":
        cfg["method"] = args.method
    data = cfg["data"]
    if getattr(args, "data", None) is not None:
        data["path"] = args.data
    for flag, key in (("time_invariant", "time_invariant"), ("time_varying", "time_varying"),
                      ("missable", "missable")):
        value = getattr(args, flag, None)
        if value is not None:
            data["covariates"][key] = _name_list(value)
    if getattr(args, "na_token", None) is not None:
        data["na_token"] = args.na_token
    if args.command == "simulate":
        sim = cfg["simulate"]
        if args.preset is not None:
            sim["preset"] = args.preset
        if args.m is not None:
            sim["m"] = _int_list(args.m)
        if args.nsim is not None:
            sim["n_sim"] = args.nsim
        if args.method is not None:
            sim["settings"] = {**(sim.get("settings") or {}), "methods": _name_list(args.method)}
    if args.command == "covcheck":
        cc = cfg["covcheck"]
        if args.preset is not None:
            cc["preset"] = args.preset
        if args.m is not None:
            cc["m"] = _int_list(args.m)
        if args.ndesigns is not None:
            cc["n_designs"] = args.ndesigns
        if args.data is not None:
            cc["source"] = "data"
        if args.no_mask:
            cc["mask"] = False
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ConfigError("--jobs must be a positive integer")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("--seed must be a nonnegative integer")
    return cfg


def _echo(cfg: dict, command: str, out: Path) -> None:
    doc = {"command": command, **cfg}
    with (out / "config.yaml").open("w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True, default_flow_style=False)


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _optimizer(cfg: dict) -> OptimizerOptions:
    return OptimizerOptions.from_dict(cfg["optimizer"])


def _load_data(cfg: dict) -> LongitudinalDataset:
    d = cfg["data"]
    if not d["path"]:
        raise ConfigError("no input CSV given (--data or data.path)")
    spec = CovariateSpec.from_dict(d["covariates"])
    try:
        return load_csv(d["path"], spec, na_token=d["na_token"], response_name=d["response"])
    except OSError as exc:
        raise ValidationError(f"cannot read {d['path']}: {exc}") from None


def _z_spec(cfg: dict) -> RandomEffectsSpec:
    re = cfg["data"]["random_effects"]
    return RandomEffectsSpec(intercept=bool(re.get("intercept", True)),
                             slopes=tuple(re.get("slopes", ())))


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_fit(cfg: dict) -> int:
    method = cfg["method"]
    if method not in FIT_METHODS:
        raise ConfigError(f"fit method must be one of {FIT_METHODS}, not {method!r}")
    data = _load_data(cfg)
    out = _outdir(cfg)
    _echo(cfg, "fit", out)
    rep = run_pipeline(method, data, _optimizer(cfg), z_spec=_z_spec(cfg))
    fit = rep.fit
    rows = []
    for j, name in enumerate(fit.names):
        flags = []
        if method == CCPE:
            flags.append(FLAG_NAIVE_SE)
        if not np.isfinite(fit.b_hat[j]):
            flags.append("unestimable")
        rows.append([name, fmt6(float(fit.b_hat[j])), fmt6(float(fit.se_b[j])), ";".join(flags)])
    _write_rows(out / "estimates.csv", ["term", "estimate", "se", "flag"], rows)
    vc = fit.psi_hat
    comp = [[f"G[{a},{b}]", fmt6(float(vc.G[a, b]))] for a in range(vc.q) for b in range(vc.q)]
    comp += [["sigma_gamma2", fmt6(vc.sigma_gamma2)], ["sigma_delta2", fmt6(vc.sigma_delta2)],
             ["sigma_eps2", fmt6(vc.sigma_eps2)]]
    _write_rows(out / "variance_components.csv", ["component", "estimate"], comp)
    print(f"{method}: {fit.n_obs} observations, {criterion_line(fit)}")
    for r in rows:
        print(",".join(r))
    if not fit.converged:
        logger.error("optimizer did not converge")
        return EXIT_NUMERICAL
    return EXIT_OK


def criterion_line(fit) -> str:
    flags = ",".join(sorted(fit.flags)) or "none"
    return f"{fit.criterion} loglik {fmt6(fit.loglik)}, flags {flags}"


def cmd_predict(cfg: dict) -> int:
    data = _load_data(cfg)
    out = _outdir(cfg)
    _echo(cfg, "predict", out)
    design = build_completed_design(data, z_spec=_z_spec(cfg))
    fit = fit_observed(design, _optimizer(cfg))
    pred = ebp(design, fit=fit)
    rows = [[data.subject[r], int(data.time[r]), fmt6(float(v))]
            for r, v in zip(pred.rows, pred.y_m_hat)]
    _write_rows(out / "predictions.csv", ["subject", "time", f"{data.response_name}_hat"], rows)
    print(f"predicted {len(rows)} missing responses from {fit.n_obs} observed")
    return EXIT_OK if fit.converged else EXIT_NUMERICAL


def _sim_configs(section: dict, seed: int) -> list:
    name = section["preset"]
    if name not in PRESET_M:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_M)}")
    ms = section["m"] or list(PRESET_M[name])
    settings = dict(section.get("settings") or {})
    for key in ("m", "seed"):
        settings.pop(key, None)
    if "n_sim" in section:
        settings["n_sim"] = section["n_sim"]
    cfgs = []
    for m in ms:
        base = preset(name, int(m), seed=seed)
        d = base.as_dict()
        d.update(settings)
        cfgs.append(SimConfig.from_dict(d))
    return cfgs


def cmd_simulate(cfg: dict) -> int:
    section = cfg["simulate"]
    cfgs = _sim_configs(section, cfg["seed"])
    out = _outdir(cfg)
    _echo(cfg, "simulate", out)
    reports = []
    for sc in cfgs:
        rep = run_monte_carlo(sc, jobs=cfg["jobs"])
        (out / f"report_m{sc.m}.csv").write_text(rep.to_csv(), encoding="utf-8")
        reports.append(rep)
    table = format_table(reports, title=f"preset {section['preset']}, n_sim={cfgs[0].n_sim}, "
                                        f"seed={cfg['seed']}")
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def _covcheck_designs(cfg: dict):
    """Yield (label, m, rep, design, vc) for the configured source."""
    cc = cfg["covcheck"]
    if cc["source"] == "data":
        data = _load_data(cfg)
        design = build_completed_design(data, z_spec=_z_spec(cfg))
        fit = fit_observed(design, _optimizer(cfg))
        yield "data", data.m, 0, design, fit.psi_hat
        return
    if cc["source"] != "preset":
        raise ConfigError("covcheck.source must be 'preset' or 'data'")
    n = cc["n_designs"]
    if not isinstance(n, int) or n < 1:
        raise ConfigError("covcheck.n_designs must be a positive integer")
    section = {"preset": cc["preset"], "m": cc["m"], "settings": cc.get("settings") or {}}
    for sc in _sim_configs(section, cfg["seed"]):
        vc = sim_components(sc.beta, sc.sd_alpha, sc.sd_eps)
        for rep in range(n):
            full, _ = generate_complete(sc, rep)
            data = apply_mdm(full, sc, rep)[0] if cc["mask"] else full
            yield cc["preset"], sc.m, rep, build_completed_design(data), vc


def cmd_covcheck(cfg: dict) -> int:
    out = _outdir(cfg)
    _echo(cfg, "covcheck", out)
    rows, sd_rows = [], []
    holds = []
    for label, m, rep, design, vc in _covcheck_designs(cfg):
        if not complete_record_rows(design).any():
            raise InfeasibleError("no complete records")
        report = sigma_cce(design, vc, sigma_cdoe(design, vc))
        exp = expansion_errors(design, vc)
        holds.append(report.inequality_holds)
        rows.append([label, m, rep, design.n_rows, fmt6(report.min_eig_diff),
                     fmt6(report.block_error), fmt6(report.schur_error),
                     fmt6(max(exp.complete, exp.completed)), str(report.inequality_holds).lower()])
        for term, so, sc in report.rows(design.beta_names):
            sd_rows.append([label, m, rep, term, fmt6(so), fmt6(sc)])
    _write_rows(out / "covcheck.csv",
                ["design", "m", "rep", "n_rows", "min_eig_diff", "block_error", "schur_error",
                 "expansion_error", "inequality_holds"], rows)
    _write_rows(out / "asymptotic_sd.csv", ["design", "m", "rep", "term", "sd_cdoe", "sd_cce"],
                sd_rows)
    worst = min(float(r[4]) for r in rows)
    ok = all(holds)
    summary = (f"covcheck {'PASS' if ok else 'FAIL'}: {sum(holds)}/{len(holds)} designs with "
               f"Sigma <= Sigma_o; smallest eigenvalue of the difference {fmt6(worst)}")
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML settings file; flags override it")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--jobs", type=int, help="worker processes for Monte Carlo runs")
    common.add_argument("--method", help="estimator (fit) or comma-separated list (simulate)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="long-format CSV: subject,time,<response>,<covariates>")
    data.add_argument("--time-invariant", dest="time_invariant",
                      help="comma-separated subject-level covariates")
    data.add_argument("--time-varying", dest="time_varying",
                      help="comma-separated occasion-level covariates")
    data.add_argument("--missable", help="comma-separated covariates that may be missing")
    data.add_argument("--na-token", dest="na_token", help="missing-value token (default NA)")

    parser = argparse.ArgumentParser(prog="relmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common, data], help="fit CDOE, CCE or CCPE to a CSV")
    sub.add_parser("predict", parents=[common, data], help="EBP of missing responses")
    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo study from a preset")
    p.add_argument("--preset", choices=sorted(PRESET_M))
    p.add_argument("--m", help="comma-separated numbers of subjects")
    p.add_argument("--nsim", type=int, help="replications per m")
    p = sub.add_parser("covcheck", parents=[common, data], help="asymptotic efficiency checks")
    p.add_argument("--preset", choices=sorted(PRESET_M))
    p.add_argument("--m", help="comma-separated numbers of subjects")
    p.add_argument("--ndesigns", type=int, help="designs per m")
    p.add_argument("--no-mask", dest="no_mask", action="store_true",
                   help="check the fully observed designs")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        return cmd_covcheck(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except RelmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
