"""Command-line interface: fit, select, score and check.

Every command writes its artifacts into ``--out`` together with a run
manifest (config and data hashes, seed, library versions). Failures leave
a machine-readable ``error.json`` in the output directory and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .config import ModelConfig, load_config
from .data import load_dataset
from .design import build_model_matrices, build_selection_problem, term_index_map
from .estimation import fit, fit_invocations
from .exceptions import CovglmError, SpecificationError
from .reporting import derived_correlation, emit_report
from .selection import _build_mm, sic_table, stepwise_workflow
from . import selfcheck

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covglm",
        description="multivariate covariance modelling for correlated counts")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        if need_config:
            p.add_argument("--config", required=True, help="YAML model configuration")
            p.add_argument("--data", default=None,
                           help="CSV data file (overrides data.path in the config)")
        p.add_argument("--out", default="covglm_out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed recorded in the "
                       "manifest and used by seeded commands")
        p.add_argument("--threads", type=int, default=1,
                       help="upper bound on worker threads")

    def fit_flags(p):
        p.add_argument("--penalty", choices=["aic", "bic"], default=None,
                       help="selection penalty (aic: delta=2, bic: delta=log N)")
        p.add_argument("--power", default=None,
                       help="override the variance power: 'estimate' or 'fixed=<v>'")
        p.add_argument("--max-iter", type=int, default=None)
        p.add_argument("--tol", type=float, default=None,
                       help="sup-norm tolerance for both estimating equations")

    p_fit = sub.add_parser("fit", help="fit the configured model and write reports")
    common(p_fit)
    fit_flags(p_fit)

    p_sel = sub.add_parser("select", help="run the stepwise workflow")
    common(p_sel)
    fit_flags(p_sel)

    p_score = sub.add_parser("score", help="one-step SIC table for the candidate "
                             "components (exactly one model fit)")
    common(p_score)
    fit_flags(p_score)

    p_check = sub.add_parser("check", help="run the derivative and invariant self-tests")
    common(p_check, need_config=False)
    p_check.add_argument("--configs", type=int, default=25,
                         help="number of random derivative configurations")
    return parser


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _manifest(args, outdir, **extra) -> None:
    payload = {
        "command": args.command,
        "seed": args.seed,
        "threads": args.threads,
        "versions": {
            "covglm": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
    }
    config_path = getattr(args, "config", None)
    if config_path:
        payload["config"] = {"path": config_path, "sha256": _sha256(config_path)}
    data_path = getattr(args, "resolved_data", None)
    if data_path:
        payload["data"] = {"path": data_path, "sha256": _sha256(data_path)}
    payload.update(extra)
    _write_json(os.path.join(outdir, "manifest.json"), payload)


def _apply_overrides(config: ModelConfig, args) -> ModelConfig:
    changes = {}
    if getattr(args, "penalty", None):
        changes["penalty"] = args.penalty
    if getattr(args, "max_iter", None):
        changes["max_iter"] = args.max_iter
    if getattr(args, "tol", None):
        changes["tol"] = args.tol
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "power", None):
        if args.power == "estimate":
            power, start = None, 1.5
        elif args.power.startswith("fixed="):
            power = start = float(args.power[len("fixed="):])
        else:
            raise SpecificationError(
                f"--power must be 'estimate' or 'fixed=<value>', got {args.power!r}")
        changes["responses"] = tuple(
            dataclasses.replace(rc, power=power, power_start=start)
            for rc in config.responses)
    return dataclasses.replace(config, **changes) if changes else config


def _load(args):
    config = _apply_overrides(load_config(args.config), args)
    data_path = args.data or config.data_path
    if data_path is None:
        raise SpecificationError(
            "no data file: pass --data or set data.path in the config")
    if config.data_path and not args.data and not os.path.isabs(data_path):
        data_path = os.path.join(os.path.dirname(os.path.abspath(args.config)),
                                 data_path)
    args.resolved_data = data_path
    dataset = load_dataset(data_path, config.schema)
    return config, dataset


def _auto_derived(fitted):
    """Weight-1 correlation ratio for every non-baseline component."""
    out = []
    mm = fitted.model
    for r in range(mm.n_responses):
        for comp in mm.components[r][1:]:
            try:
                out.append(derived_correlation(fitted, r, comp.label))
            except (SpecificationError, FloatingPointError):
                continue
    return out


def _fit_kwargs(config: ModelConfig) -> dict:
    return {"max_iter": config.max_iter, "score_tol": config.tol,
            "step_tol": config.step_tol}


def _cmd_fit(args) -> int:
    config, dataset = _load(args)
    mm, info = build_model_matrices(dataset, config)
    fitted = fit(mm, **_fit_kwargs(config))
    meta = {"centering": info.centers,
            "gpl_includes_2pi_constant": True,
            "n_rows": dataset.n, "n_groups": dataset.n_groups}
    emit_report(fitted, args.out, derived=_auto_derived(fitted),
                term_indices=term_index_map(mm, info), metadata=meta)
    _manifest(args, args.out, converged=bool(fitted.converged),
              iterations=int(fitted.n_iter))
    return 0


def _cmd_select(args) -> int:
    config, dataset = _load(args)
    problem, info = build_selection_problem(dataset, config)
    n_obs = dataset.n * len(config.responses)
    final, trace = stepwise_workflow(problem, delta=config.delta(n_obs),
                                     wald_threshold=config.wald_threshold,
                                     **_fit_kwargs(config))
    emit_report(final, args.out, trace=trace, derived=_auto_derived(final),
                term_indices=term_index_map(final.model, info),
                metadata={"centering": info.centers,
                          "penalty": config.penalty,
                          "delta": config.delta(n_obs)})
    _manifest(args, args.out, converged=bool(final.converged))
    return 0


def _cmd_score(args) -> int:
    config, dataset = _load(args)
    problem, _ = build_selection_problem(dataset, config)
    candidates = []
    for r, spec in enumerate(problem.responses):
        candidates.extend((r, km) for km in spec.candidate_components)
    if not candidates:
        raise SpecificationError("score needs candidate_covariance entries "
                                 "in at least one response")
    picks = {r: (spec.base_terms, spec.base_components)
             for r, spec in enumerate(problem.responses)}
    before = fit_invocations()
    base = fit(_build_mm(problem, picks), compute_vcov=False, **_fit_kwargs(config))
    n_obs = dataset.n * len(config.responses)
    rows = sic_table(base, candidates, delta=config.delta(n_obs))
    used = fit_invocations() - before

    os.makedirs(args.out, exist_ok=True)
    frame = pd.DataFrame(rows)
    frame.to_csv(os.path.join(args.out, "sic_table.csv"), index=False,
                 lineterminator="\n")
    _write_json(os.path.join(args.out, "sic_table.json"),
                {"penalty": config.penalty, "delta": config.delta(n_obs),
                 "rows": rows})
    _manifest(args, args.out, fit_invocations=used)
    return 0


def _cmd_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = selfcheck.run_checks(seed=seed, n_configs=args.configs)
    for res in results:
        print(res.line())
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "check_report.json"),
                {"seed": seed,
                 "results": [dataclasses.asdict(r) for r in results]})
    _manifest(args, args.out, passed=selfcheck.all_passed(results))
    if not selfcheck.all_passed(results):
        print("self-check FAILED", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {"fit": _cmd_fit, "select": _cmd_select, "score": _cmd_score,
             "check": _cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (CovglmError, OSError) as exc:
        try:
            os.makedirs(args.out, exist_ok=True)
            _write_json(os.path.join(args.out, "error.json"),
                        {"error": type(exc).__name__, "message": str(exc)})
        except OSError:
            pass  # the output directory itself is the failure; stderr still reports
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
