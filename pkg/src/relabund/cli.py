"""Command-line entry point.

Subcommands ``fit``, ``simulate``, ``verify-variance``, ``validate`` and
``subsample``.  Reports are single JSON documents with sorted keys and no
timestamps, so identical inputs and seeds give identical bytes.

Exit status: 0 on success, 1 when estimation fails or does not converge,
2 for invalid input (the error JSON names the file and line when known).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import pydantic
import scipy
import yaml

from . import __version__
from .config import RunConfig, load_config, survey_scenario
from .estimators import ConvergenceError
from .glm import EstimationError, FitOptions, Penalty, build_design, fit
from .io import (
    SCHEMA_VERSION,
    InputError,
    dumps_report,
    matrix_block,
    read_counts,
    read_effort,
    sha256_hex,
    write_counts,
    write_effort,
)
from .model import OPP, STD, EffortSpec, IndexSpace, ParameterSet, relative_abundances, standardize_abundance
from .simulate import (
    Rect,
    SpatialScenario,
    VisitScenario,
    beta_heterogeneity,
    compile_field,
    simulate_counts,
    simulate_ipp,
    simulate_survey,
    simulate_visits,
)
from .validation import run_replicate, subsample_effort, validation_study
from .variance import verify_variance_mc


class FitFailure(Exception):
    def __init__(self, report: dict):
        self.report = report
        super().__init__("fit did not converge")


def _versions() -> dict:
    return {"relabund": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def _envelope(command: str, seed: int | None, config: RunConfig, result: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "config_hash": sha256_hex(config.canonical_json().encode()),
        "config": config.model_dump(mode="json", by_alias=True),
        "versions": _versions(),
        "result": result,
    }


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# ----------------------------------------------------------------------
# fit
# ----------------------------------------------------------------------


def _fit_table(counts, effort, cfg) -> dict:
    space = counts.space
    I, J = space.n_species, space.n_sites
    ref = space.species_index(cfg.reference_species) if cfg.reference_species else None
    ref_site = space.site_index(cfg.reference_site) if cfg.reference_site else 0
    p0 = None
    if cfg.p0 == "equal":
        p0 = np.where(counts.monitored[:, STD], 1.0, 0.0)
    elif isinstance(cfg.p0, dict):
        p0 = np.zeros(I)
        for lab, v in cfg.p0.items():
            p0[space.species_index(lab)] = v
        missing = [space.species[i] for i in np.flatnonzero(counts.monitored[:, STD] & (p0 == 0))]
        if missing:
            raise InputError(f"p0 missing for species monitored in std: {missing}")
    penalty = None
    if cfg.penalty is not None:
        prox = np.asarray(cfg.penalty.proximity, dtype=float)
        if prox.shape != (J, J):
            raise InputError(f"proximity must be {J}x{J}")
        penalty = Penalty(cfg.penalty.nu, prox)
    opts = cfg.options
    options = FitOptions(
        max_iterations=opts.max_iterations,
        deviance_rel_tol=opts.deviance_rel_tol,
        score_tol=opts.score_tol,
        step_halving_max=opts.step_halving_max,
        dispersion_mode=opts.dispersion_mode,
        penalty=penalty,
    )
    design = build_design(counts, effort, reference=ref, p0=p0)
    res = fit(design, counts, options)
    n = res.n_tilde
    std_n, degenerate = standardize_abundance(n)
    sp, st = space.species, space.sites
    report = {
        "reference_species": sp[design.reference],
        "reference_site": st[ref_site],
        "n_tilde": matrix_block(n, sp, st),
        "se_n_tilde": matrix_block(res.se_n(), sp, st),
        "e_tilde_opp": {"site": list(st), "values": res.params.e_tilde[:, OPP], "se": res.se_e1()},
        "p_tilde_std": {
            "species": list(sp),
            "values": res.params.p_tilde[:, STD],
            "se": res.se_p0(),
            "fixed": p0 is not None,
        },
        "relative_abundance": matrix_block(relative_abundances(n, ref_site), sp, st),
        "standardized_abundance": matrix_block(std_n, sp, st),
        "degenerate_species": [sp[i] for i in np.flatnonzero(degenerate)],
        "monitored": {"std": [sp[i] for i in np.flatnonzero(counts.monitored[:, STD])], "opp": [sp[i] for i in np.flatnonzero(counts.monitored[:, OPP])]},
        "separated_cells": sorted([sp[i], st[j]] for i, j in res.separation_flags),
        "boundary_species": [sp[i] for i in np.flatnonzero(design.boundary_species)],
        "zero_opp_sites": [st[j] for j in np.flatnonzero(design.zero_opp_sites)],
        "dispersion_mode": options.dispersion_mode,
        "dispersion": res.dispersion,
        "deviance": res.deviance,
        "loglik": res.loglik,
        "df_resid": res.df_resid,
        "iterations": res.iterations,
        "converged": res.converged,
        "score_max": res.score_max,
        "penalty_nu": None if penalty is None else penalty.nu,
    }
    if not res.converged:
        raise FitFailure(report)
    return report


def cmd_fit(args, config: RunConfig) -> int:
    if not args.counts or not args.effort:
        raise InputError("fit needs --counts and --effort")
    cfg = config.fit
    data = read_counts(args.counts, habitat_pooling=cfg.habitat_pooling, unmonitored=cfg.unmonitored)
    if isinstance(data, dict):
        strata = {h: _fit_table(t, read_effort(args.effort, t.space), cfg) for h, t in data.items()}
        result = {"habitat_pooling": True, "strata": strata}
    else:
        result = _fit_table(data, read_effort(args.effort, data.space), cfg)
    _emit(dumps_report(_envelope("fit", None, config, result)), args.out)
    return 0


# ----------------------------------------------------------------------
# simulate
# ----------------------------------------------------------------------


def cmd_simulate(args, config: RunConfig) -> int:
    if config.simulate is None:
        raise InputError("simulate needs a 'simulate' section in --config")
    sc = config.simulate.scenario
    rep = config.simulate.replicate
    effort_text = None
    if sc.kind == "cells":
        params = ParameterSet(np.array(sc.n_tilde), np.array(sc.e_tilde), np.array(sc.p_tilde))
        I, J = params.shape
        space = IndexSpace(sc.species or IndexSpace.default(I, J).species, sc.sites or IndexSpace.default(I, J).sites)
        table = simulate_counts(params, args.seed, rep, space=space)
    elif sc.kind == "visits":
        abundance = np.array(sc.abundance)
        mon = np.ones((abundance.shape[0], 2), dtype=bool)
        mon[sc.unmonitored_std, STD] = False
        scenario = VisitScenario(
            abundance,
            [[np.array(v, dtype=float) for v in vk] for vk in sc.visits],
            monitored=mon,
            individual_p=beta_heterogeneity(sc.beta_concentration) if sc.beta_concentration else None,
        )
        table = simulate_visits(scenario, args.seed, rep)
    elif sc.kind == "ipp":
        scenario = SpatialScenario(
            [Rect(r.x0, r.x1, r.y0, r.y1) for r in sc.sites],
            [compile_field(e) for e in sc.intensity],
            list(sc.bound),
            [[compile_field(e) for e in sc.retention.std], [compile_field(e) for e in sc.retention.opp]],
        )
        _, table = simulate_ipp(scenario, args.seed, rep)
    else:
        survey = simulate_survey(survey_scenario(sc), args.seed, rep)
        table = survey.counts
        effort_text = write_effort(survey.effort, table.space)
    text = write_counts(table)
    if args.out is None:
        raise InputError("simulate needs --out for the counts CSV")
    Path(args.out).write_text(text, encoding="utf-8")
    if effort_text is not None and args.effort:
        Path(args.effort).write_text(effort_text, encoding="utf-8")
    result = {
        "kind": sc.kind,
        "replicate": rep,
        "n_species": table.space.n_species,
        "n_sites": table.space.n_sites,
        "totals": {"std": int(table.dataset(STD).sum()), "opp": int(table.dataset(OPP).sum())},
        "counts_sha256": sha256_hex(text.encode()),
        "effort_sha256": None if effort_text is None else sha256_hex(effort_text.encode()),
    }
    sys.stdout.write(dumps_report(_envelope("simulate", args.seed, config, result)))
    return 0


# ----------------------------------------------------------------------
# verify-variance
# ----------------------------------------------------------------------

DEFAULT_N = [
    [20.0, 35.0, 12.0, 28.0, 40.0, 16.0],
    [15.0, 22.0, 30.0, 10.0, 18.0, 25.0],
    [32.0, 14.0, 24.0, 36.0, 12.0, 30.0],
    [10.0, 28.0, 18.0, 22.0, 26.0, 14.0],
]
DEFAULT_EFFORT0 = [1.0, 1.2, 0.8, 1.0, 1.5, 0.9]


def cmd_verify_variance(args, config: RunConfig) -> int:
    cfg = config.verify_variance
    n = np.array(cfg.n_tilde if cfg.n_tilde is not None else DEFAULT_N, dtype=float)
    I, J = n.shape
    e0 = np.array(cfg.effort0 if cfg.effort0 is not None else DEFAULT_EFFORT0[:J] if J <= 6 else np.ones(J))
    p0 = np.array(cfg.p0 if cfg.p0 is not None else np.ones(I), dtype=float)
    if e0.shape != (J,) or p0.shape != (I,):
        raise InputError("verify_variance: effort0 and p0 must match n_tilde")
    # the opportunistic column is replaced by e1_scale * e0 inside the harness
    params = ParameterSet(n, np.column_stack([e0, e0]), np.column_stack([p0, np.ones(I)]))
    check = verify_variance_mc(
        params,
        EffortSpec(e0),
        cfg.e1_scale,
        cfg.replicates,
        args.seed,
        threads=args.threads,
        band=cfg.band,
        min_expected=cfg.min_expected,
        method=cfg.method,
    )
    space = IndexSpace.default(I, J)
    cells = []
    for i in range(I):
        for j in range(J):
            cells.append(
                {
                    "species": space.species[i],
                    "site": space.sites[j],
                    "analytic": check.analytic[i, j],
                    "empirical": check.empirical[i, j],
                    "ratio": check.ratio[i, j],
                    "ratio_se": check.ratio_se[i, j],
                    "reduction_ratio": check.reduction_ratio[i, j],
                    "expected_x0": check.expected_x0[i, j],
                    "eligible": bool(check.eligible[i, j]),
                    "pass": bool(check.passed[i, j]) if check.eligible[i, j] else None,
                }
            )
    result = {
        "method": check.method,
        "replicates": check.replicates,
        "failures": check.failures,
        "band": check.band,
        "all_passed": check.all_passed,
        "cells": cells,
    }
    _emit(dumps_report(_envelope("verify-variance", args.seed, config, result)), args.out)
    return 0


# ----------------------------------------------------------------------
# validate
# ----------------------------------------------------------------------


def _power_json(rep) -> dict:
    return {
        "method": rep.method_tag,
        "per_species_r": rep.per_species_r,
        "groups": {
            g: {"median": s.median, "iqr": [s.q25, s.q75], "n_species": s.n_species}
            for g, s in rep.group_summaries.items()
        },
        "excluded": rep.excluded,
        "n_sites_used": int(rep.sites_used.sum()),
    }


def cmd_validate(args, config: RunConfig) -> int:
    cfg = config.validate_
    scenario = survey_scenario(cfg.scenario)
    study = validation_study(scenario, cfg.replicates, args.seed, threads=args.threads, with_subsample=cfg.subsample)
    first = run_replicate(scenario, args.seed, 0, cfg.subsample)
    result = {
        "replicates": study.replicates,
        "win_rate": study.win_rate,
        "comparison_group": study.comparison_group,
        "median_of_medians": {
            tag: {g: (float(np.median(v)) if np.all(np.isfinite(v)) else None) for g, v in groups.items()}
            for tag, groups in study.medians.items()
        },
        "medians": study.medians,
        "stability_medians": study.stability_medians if cfg.subsample else None,
        "subsample_factor_mean": float(np.mean(study.subsample_factor)) if cfg.subsample else None,
        "replicate0": {
            "reports": {tag: _power_json(r) for tag, r in first.reports.items()},
            "stability": _power_json(first.stability) if first.stability else None,
        },
    }
    _emit(dumps_report(_envelope("validate", args.seed, config, result)), args.out)
    return 0


# ----------------------------------------------------------------------
# subsample
# ----------------------------------------------------------------------


def cmd_subsample(args, config: RunConfig) -> int:
    if not args.counts or not args.out:
        raise InputError("subsample needs --counts and --out")
    table = read_counts(args.counts, unmonitored=config.fit.unmonitored)
    if table.provenance is None:
        raise InputError("subsample needs point_id and year columns", args.counts)
    sub = subsample_effort(table, args.seed)
    text = write_counts(sub.counts)
    Path(args.out).write_text(text, encoding="utf-8")
    effort_text = write_effort(sub.effort, sub.counts.space)
    if args.effort:
        Path(args.effort).write_text(effort_text, encoding="utf-8")
    result = {
        "point_years_before": sub.point_years_before,
        "point_years_after": sub.point_years_after,
        "reduction_factor": sub.reduction_factor,
        "counts_sha256": sha256_hex(text.encode()),
        "effort_sha256": sha256_hex(effort_text.encode()),
    }
    sys.stdout.write(dumps_report(_envelope("subsample", args.seed, config, result)))
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "verify-variance": cmd_verify_variance,
    "validate": cmd_validate,
    "subsample": cmd_subsample,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relabund", description="Relative abundance from standardized and opportunistic counts.")
    parser.add_argument("--version", action="version", version=f"relabund {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fit": "fit the joint model to a counts file",
        "simulate": "write a simulated counts CSV",
        "verify-variance": "Monte Carlo check of the asymptotic variances",
        "validate": "predictive-power study on synthetic surveys",
        "subsample": "keep one point-year per site",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--counts", help="counts CSV (dataset,species,site,count[,habitat][,point_id,year])")
        p.add_argument("--effort", help="effort CSV (site,effort[,area][,points]); an output path for simulate/subsample")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, default=0, help="base seed (non-negative)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo commands")
    return parser


def _error(command: str, kind: str, exc: Exception, extra: dict | None = None) -> str:
    err = {"type": kind, "message": str(exc)}
    if isinstance(exc, InputError):
        err["file"] = exc.path
        err["line"] = exc.line
    doc = {"schema_version": SCHEMA_VERSION, "command": command, "error": err}
    if extra:
        doc["partial_result"] = extra
    return dumps_report(doc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed < 0 or args.seed >= 2**64:
        sys.stdout.write(_error(args.command, "input", InputError("seed must be a 64-bit unsigned integer")))
        return 2
    if args.threads < 1:
        sys.stdout.write(_error(args.command, "input", InputError("threads must be at least 1")))
        return 2
    try:
        config = load_config(args.config)
        return COMMANDS[args.command](args, config)
    except FitFailure as exc:
        sys.stdout.write(_error(args.command, "estimation", exc, exc.report))
        return 1
    except (EstimationError, ConvergenceError) as exc:
        sys.stdout.write(_error(args.command, "estimation", exc))
        return 1
    except (InputError, pydantic.ValidationError, yaml.YAMLError, OSError, ValueError, KeyError) as exc:
        sys.stdout.write(_error(args.command, "input", exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
