"""Command-line interface.

Subcommands
-----------
estimate   calibrated MERF area means (and bootstrap MSE) from survey and
           aggregate CSV files
simulate   model-based simulation study for one scenario
weights    dump per-area calibration weights
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import run_bootstrap
from .calibration import ELInfeasible, calibrate_all
from .config import ConfigError, RunConfig, load_config
from .data import OutOfSampleError
from .estimators import merf_agg_value
from .io import InputError, load_aggregates, load_survey, write_json, write_table
from .merf import fit_merf
from .simulation import ScenarioSpec, run_study

logger = logging.getLogger("merfagg")

RELIABLE_CV = 0.20

ESTIMATE_COLUMNS = ("area_id", "n_i", "N_i", "estimate", "mse_hat", "rmse_hat", "cv",
                    "reliable", "provenance", "covariates_used", "donor_area")


def _load_inputs(cfg: RunConfig):
    if not cfg.survey or not cfg.aggregates:
        raise ConfigError("--survey and --aggregates are required")
    survey = load_survey(cfg.survey)
    aggregates = load_aggregates(cfg.aggregates)
    try:
        aggregates.check_against(survey)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return survey, aggregates


def _calibrate(cfg, survey, aggregates):
    fitted = fit_merf(survey, cfg.merf)
    calib = calibrate_all(survey, aggregates, fitted.importance_ranking(), cfg.el)
    return fitted, calib


def cmd_estimate(cfg: RunConfig) -> Path:
    survey, aggregates = _load_inputs(cfg)
    fitted, calib = _calibrate(cfg, survey, aggregates)
    include = cfg.el.augmented_rows_in_estimate
    areas = aggregates.area
    estimates = [merf_agg_value(fitted, calib[a], include) for a in areas]
    mse = [None] * len(areas)
    failed = None
    if cfg.B > 0:
        report = run_bootstrap(fitted, calib, survey, aggregates, cfg.bootstrap, cfg.merf,
                               include_augmented=include)
        mse = [float(m) for m in report.mse]
        failed = report.n_failed

    names = survey.covariate_names
    rows, per_area = [], {}
    for a, est, m in zip(areas, estimates, mse):
        c = calib[a]
        rmse = None if m is None else float(np.sqrt(m))
        cv = None if rmse is None or est == 0 else rmse / abs(est)
        reliable = None if cv is None else bool(cv < RELIABLE_CV)
        rows.append([a, survey.n_i(a), aggregates.size(a), est, m, rmse, cv,
                     "" if reliable is None else str(reliable).lower(), c.label,
                     len(c.covariates_used), "" if c.donor_area is None else c.donor_area])
        per_area[str(a)] = {
            "provenance": c.label,
            "covariates_used": [names[k] for k in c.covariates_used],
            "donor_area": c.donor_area,
            "reliable": reliable,
            "cv": cv,
        }
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "estimates.csv", ESTIMATE_COLUMNS, rows)
    write_json(out / "diagnostics.json", {
        "sigma2_u": fitted.sigma2_u,
        "sigma2_e": fitted.sigma2_e,
        "iterations_used": fitted.iterations_used,
        "converged": fitted.converged,
        "importance": {names[k]: float(v) for k, v in enumerate(fitted.forest.importance)},
        "importance_ranking": [names[k] for k in fitted.importance_ranking()],
        "oob_rows_missing": fitted.forest.n_oob_missing,
        "out_of_sample_areas": [str(a) for a in aggregates.out_of_sample(survey)],
        "bootstrap": {"B": cfg.B, "failed_replicates": failed},
        "reliable_cv_threshold": RELIABLE_CV,
        "seed": cfg.seed,
        "areas": per_area,
    })
    return out


def cmd_weights(cfg: RunConfig) -> Path:
    survey, aggregates = _load_inputs(cfg)
    fitted, calib = _calibrate(cfg, survey, aggregates)
    names = survey.covariate_names
    rows, info = [], {}
    for a in aggregates.area:
        c = calib[a]
        for j, (r, w) in enumerate(zip(c.rows, c.weights)):
            rows.append([a, c.label, int(r), survey.area[r], "own" if j < c.n_own else "donor",
                         float(w)])
        info[str(a)] = {
            "provenance": c.label,
            "covariates_used": [names[k] for k in c.covariates_used],
            "lambda": [float(v) for v in c.lam],
            "donor_area": c.donor_area,
            "attempts": [list(t) for t in c.attempts],
        }
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "weights.csv",
                ("area_id", "provenance", "survey_row", "source_area", "origin", "weight"), rows)
    write_json(out / "calibration.json", info)
    return out


def cmd_simulate(cfg: RunConfig) -> Path:
    try:
        spec = ScenarioSpec(cfg.scenario, M=cfg.replications, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    merf = cfg.merf
    if merf.forest.split_candidates is None:
        merf = replace(merf, forest=replace(merf.forest, split_candidates=1))
    boot = cfg.bootstrap if cfg.B > 0 else None
    try:
        result = run_study(spec, cfg.estimators, merf, cfg.el, boot, n_jobs=cfg.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    table = result.metrics()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "metrics.csv", ("scenario", "estimator", "area_id", "rmse", "rb",
                                      "rrmse", "rb_rmse", "rrmse_rmse"), table.rows())
    write_table(out / "summary.csv", ("scenario", "estimator", "metric", "median", "mean"),
                table.summary_rows())
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merfagg",
        description="Small area means from unit-level survey data and aggregate "
                    "covariates with calibrated mixed effects random forests.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="flat TOML file of config keys")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
        p.add_argument("--jobs", type=int, help="worker processes (default 1)")

    for name, text in (("estimate", "area means, optional bootstrap MSE"),
                       ("weights", "dump calibration weights per area")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--survey", help="CSV with header area_id,y,<covariates>")
        p.add_argument("--aggregates", help="CSV with header area_id,N,<covariates>")
        if name == "estimate":
            p.add_argument("--bootstrap", type=int, metavar="B", dest="B",
                           help="bootstrap replicates; 0 disables MSE")

    p = sub.add_parser("simulate", help="model-based simulation study")
    common(p)
    p.add_argument("--scenario", help="normal, pareto, interaction or logscale")
    p.add_argument("--replications", type=int, metavar="M")
    p.add_argument("--bootstrap", type=int, metavar="B", dest="B",
                   help="bootstrap replicates per replication; 0 disables MSE")
    p.add_argument("--estimators", type=lambda s: tuple(s.split(",")),
                   help="comma-separated subset of Direct,BHF,MerfInd,MerfAgg,Oracle")
    return parser


_COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "weights": cmd_weights}
_OVERRIDES = ("survey", "aggregates", "out", "seed", "jobs", "B", "scenario",
              "replications", "estimators")


def _fail(category: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(**{k: getattr(args, k, None) for k in _OVERRIDES})
        if not 0 <= cfg.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if cfg.B < 0 or cfg.jobs < 1:
            raise ConfigError("bootstrap count must be >= 0 and jobs >= 1")
        out = _COMMANDS[args.command](cfg.seeded())
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except (InputError, OutOfSampleError) as exc:
        return _fail("input", exc, 2)
    except (ELInfeasible, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", exc, 3)
    except RuntimeError as exc:
        return _fail("runtime", exc, 4)
    except ValueError as exc:
        return _fail("input", exc, 2)
    logger.info("wrote %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
