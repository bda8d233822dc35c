"""Post-fit summaries: derived correlations, fitted-value intervals, report files.

Everything here is pure post-processing over an immutable FittedModel, so
report generation is safe to run in parallel over many fits.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .exceptions import SpecificationError
from .estimation import FittedModel
from .selection import wald_test

__all__ = [
    "DerivedCorrelation",
    "derived_correlation",
    "gaussian_pseudo_likelihood",
    "fitted_values_ci",
    "dispersion_table",
    "wald_table",
    "emit_report",
    "load_report_parameters",
]


@dataclass(frozen=True)
class DerivedCorrelation:
    """Intra-group correlation implied by a ratio of dispersion components."""

    response: str
    parts: tuple          # ((component label, weight), ...)
    value: float
    se: float


def _lambda_subvcov(fitted: FittedModel, positions):
    if fitted.vcov is None:
        raise SpecificationError("model was fitted without variance estimation")
    idx = [fitted.n_coef + p for p in positions]
    sub = fitted.vcov[np.ix_(idx, idx)]
    if not np.all(np.isfinite(sub)):
        raise SpecificationError("model was fitted without variance estimation")
    return sub


def derived_correlation(fitted: FittedModel, response: int, component,
                        weight: float = 1.0) -> DerivedCorrelation:
    """Correlation rho = sum_d w_d tau_d / (tau_0 + sum_d w_d tau_d).

    ``component`` is a single structure label (its entry multiplied by
    ``weight``, e.g. 1/d for distance lag d) or a mapping of labels to
    weights for combined structures. tau_0 is the coefficient of the first
    (baseline) structure of the response. The standard error comes from the
    delta method with the closed-form gradient
    d rho/d tau_0 = -s/t^2 and d rho/d tau_d = w_d (t - s)/t^2 evaluated at
    s = sum w tau and t = tau_0 + s, using the sandwich covariance of the
    involved dispersion estimates.
    """
    mm = fitted.model
    parts = dict(component) if isinstance(component, dict) else {component: weight}
    base_label = mm.components[response][0].label
    if base_label in parts:
        raise SpecificationError(
            f"{base_label!r} is the baseline structure, not a numerator component")
    labels = [c.label for c in mm.components[response]]
    for lab in parts:
        if lab not in labels:
            raise SpecificationError(
                f"{lab!r} is not an active dispersion component of "
                f"response {mm.response_names[response]!r}")

    pos0 = fitted.lambda_index("tau", response, 0)
    pos = [fitted.lambda_index("tau", response, labels.index(lab)) for lab in parts]
    tau0 = fitted.lam[pos0]
    w = np.array(list(parts.values()), dtype=float)
    taus = fitted.lam[pos]
    s = float(w @ taus)
    t = tau0 + s
    if t == 0.0:
        raise SpecificationError("derived correlation undefined: "
                                 "tau_0 + weighted sum of components is zero")
    value = s / t

    grad = np.empty(1 + len(pos))
    grad[0] = -s / t ** 2
    grad[1:] = w * (t - s) / t ** 2
    sub = _lambda_subvcov(fitted, [pos0] + pos)
    se = float(np.sqrt(grad @ sub @ grad))
    name = mm.response_names[response]
    return DerivedCorrelation(name, tuple(zip(parts.keys(), w.tolist())),
                              float(value), se)


def gaussian_pseudo_likelihood(fitted: FittedModel) -> float:
    """Gaussian log-density at the fitted moments; larger is better.

    Includes the NR*log(2*pi)/2 constant so values from models with the
    same data size are directly comparable.
    """
    return float(fitted.gpl)


def fitted_values_ci(fitted: FittedModel, response: int, x: np.ndarray,
                     offset=None, level: float = 0.95) -> pd.DataFrame:
    """Fitted means exp(eta) with pointwise confidence intervals.

    ``x`` holds rows of design values matching the response's coefficient
    block; ``offset`` is additive on the log scale (zero when omitted,
    which corresponds to unit exposure). Intervals are exp(eta +- z*SE(eta))
    so the endpoints are strictly positive and bracket the fitted mean.
    """
    mm = fitted.model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = mm.design[response].shape[1]
    if x.shape[1] != k:
        raise SpecificationError(
            f"new design for response {mm.response_names[response]!r} has "
            f"{x.shape[1]} columns, expected {k}: {mm.coef_names[response]}")
    off = np.zeros(x.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != (x.shape[0],):
        raise SpecificationError("offset must have one entry per new design row")

    beta = fitted.beta_for(response)
    sl = mm.beta_slices()[response]
    vb = fitted.vcov_beta()[sl, sl]
    eta = x @ beta + off
    se_eta = np.sqrt(np.einsum("ij,jk,ik->i", x, vb, x))
    z = stats.norm.ppf(0.5 + level / 2.0)
    return pd.DataFrame({
        "eta": eta,
        "se_eta": se_eta,
        "fit": np.exp(eta),
        "lower": np.exp(eta - z * se_eta),
        "upper": np.exp(eta + z * se_eta),
    })


def dispersion_table(fitted: FittedModel) -> pd.DataFrame:
    """Dispersion estimates with sandwich SEs and Z-statistics."""
    est = fitted.lam
    se = fitted.se_lambda()
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, est / se, np.nan)
    return pd.DataFrame({
        "parameter": list(fitted.layout.labels),
        "estimate": est,
        "se": se,
        "z": z,
    })


def wald_table(fitted: FittedModel, term_indices) -> pd.DataFrame:
    """Joint Wald tests per named effect.

    ``term_indices`` maps display labels to lists of positions in the
    stacked (beta, lambda) parameter vector; mean-term groups are tested
    jointly (one row per term, Df = block size).
    """
    rows = []
    for label, idx in term_indices:
        res = wald_test(fitted, list(idx))
        rows.append({"effect": label, "df": res.df,
                     "statistic": res.statistic, "p_value": res.p_value})
    return pd.DataFrame(rows, columns=["effect", "df", "statistic", "p_value"])


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _results_payload(fitted: FittedModel, derived, metadata):
    mm = fitted.model
    have_vcov = fitted.vcov is not None and bool(np.all(np.isfinite(np.diag(fitted.vcov))))
    se_all = fitted.se() if have_vcov else np.full(fitted.beta.size + fitted.lam.size, np.nan)
    payload = {
        "responses": list(mm.response_names),
        "parameters": {
            "beta": {"labels": mm.coef_labels(), "estimate": fitted.beta.tolist(),
                     "se": se_all[: fitted.n_coef].tolist()},
            "dispersion": {"labels": list(fitted.layout.labels),
                           "estimate": fitted.lam.tolist(),
                           "se": se_all[fitted.n_coef:].tolist()},
            "rho": list(fitted.state.rho),
            "power": list(fitted.state.power),
            "tau": [list(t) for t in fitted.state.tau],
        },
        "fit": {
            "converged": bool(fitted.converged),
            "iterations": int(fitted.n_iter),
            "max_abs_score": float(fitted.max_abs_score),
            "gaussian_pseudo_likelihood": float(fitted.gpl),
            "n_parameters": int(fitted.beta.size + fitted.lam.size),
            "n_observations": int(mm.n * mm.n_responses),
        },
        "derived_correlations": [
            {"response": d.response, "parts": [list(p) for p in d.parts],
             "estimate": d.value, "se": d.se} for d in derived],
        "metadata": dict(metadata or {}),
    }
    payload["metadata"].setdefault("gpl_includes_2pi_constant", True)
    return _jsonable(payload)


def _summary_text(fitted: FittedModel, derived, tables):
    mm = fitted.model
    lines = []
    lines.append("model fit summary")
    lines.append(f"  responses: {', '.join(mm.response_names)}")
    lines.append(f"  observations: {mm.n} rows x {mm.n_responses} responses")
    lines.append(f"  converged: {fitted.converged} in {fitted.n_iter} iterations "
                 f"(max |score| {fitted.max_abs_score:.3e})")
    lines.append(f"  gaussian pseudo-likelihood: {fitted.gpl:.3f}")
    lines.append("")
    have_vcov = fitted.vcov is not None and bool(np.all(np.isfinite(np.diag(fitted.vcov))))
    se_all = fitted.se() if have_vcov else np.full(fitted.beta.size + fitted.lam.size, np.nan)
    lines.append("regression coefficients")
    for lab, b, s in zip(mm.coef_labels(), fitted.beta, se_all[: fitted.n_coef]):
        lines.append(f"  {lab:<32s} {b:>12.5f}  (SE {s:.5f})")
    lines.append("")
    lines.append("dispersion parameters")
    for lab, l, s in zip(fitted.layout.labels, fitted.lam, se_all[fitted.n_coef:]):
        lines.append(f"  {lab:<32s} {l:>12.5f}  (SE {s:.5f})")
    if derived:
        lines.append("")
        lines.append("derived correlations")
        for d in derived:
            part = " + ".join(f"{w:g}*{lab}" for lab, w in d.parts)
            lines.append(f"  {d.response}: {part} -> {d.value:.4f} (SE {d.se:.4f})")
    for name, frame in tables:
        lines.append("")
        lines.append(name)
        lines.append(frame.to_string(index=False))
    lines.append("")
    return "\n".join(lines)


def emit_report(fitted: FittedModel, outdir, trace=None, derived=(),
                term_indices=None, metadata=None) -> dict:
    """Write the report files for one fit and return their paths.

    Produces ``results.json`` (hierarchical, round-trips the parameter
    vectors bit-exactly), one ``fitted_<response>.csv`` per response with
    observed values, fitted means, interval bounds and standardized
    residuals for external plotting, ``summary.txt``, and optionally
    ``selection_trace.json`` / ``wald_table.csv``.
    """
    os.makedirs(outdir, exist_ok=True)
    mm = fitted.model
    derived = list(derived)
    paths = {}

    tables = []
    if term_indices:
        wt = wald_table(fitted, term_indices)
        p = os.path.join(outdir, "wald_table.csv")
        wt.to_csv(p, index=False, lineterminator="\n")
        paths["wald_table"] = p
        tables.append(("wald tests (effect, df, statistic, p-value)", wt))
    have_vcov = fitted.vcov is not None and bool(np.all(np.isfinite(np.diag(fitted.vcov))))
    if have_vcov:
        dt = dispersion_table(fitted)
        p = os.path.join(outdir, "dispersion_table.csv")
        dt.to_csv(p, index=False, lineterminator="\n")
        paths["dispersion_table"] = p
        tables.append(("dispersion (parameter, estimate, se, z)", dt))

    results = _results_payload(fitted, derived, metadata)
    p = os.path.join(outdir, "results.json")
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2)
        fh.write("\n")
    paths["results"] = p

    cov = fitted.covariance_at_fit()
    sd_by_resp = [np.empty(mm.n) for _ in range(mm.n_responses)]
    for g, idx in enumerate(mm.groups.rows):
        d = np.sqrt(np.diag(cov.cov_blocks[g]))
        for r in range(mm.n_responses):
            sd_by_resp[r][idx] = d[r * idx.size: (r + 1) * idx.size]
    for r, name in enumerate(mm.response_names):
        rows = np.arange(mm.n)
        eta = mm.design[r] @ fitted.beta_for(r) + mm.offset[r]
        if have_vcov:
            ci = fitted_values_ci(fitted, r, mm.design[r], offset=mm.offset[r])
            lower, upper, se_eta = ci["lower"], ci["upper"], ci["se_eta"]
        else:
            lower = upper = se_eta = np.full(mm.n, np.nan)
        frame = pd.DataFrame({
            "row": rows + 1,
            "observed": mm.y[r],
            "fitted": fitted.mu[r],
            "eta": eta,
            "se_eta": se_eta,
            "lower": lower,
            "upper": upper,
            "pearson_residual": (mm.y[r] - fitted.mu[r]) / sd_by_resp[r],
        })
        p = os.path.join(outdir, f"fitted_{name}.csv")
        frame.to_csv(p, index=False, lineterminator="\n")
        paths[f"fitted_{name}"] = p

    p = os.path.join(outdir, "summary.txt")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(_summary_text(fitted, derived, tables))
    paths["summary"] = p

    if trace is not None:
        p = os.path.join(outdir, "selection_trace.json")
        with open(p, "w", encoding="utf-8") as fh:
            json.dump({"steps": trace.to_jsonable()}, fh, indent=2)
            fh.write("\n")
        paths["selection_trace"] = p
    return paths


def load_report_parameters(path):
    """Read back (beta, rho, power, tau) from an emitted ``results.json``."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    par = payload["parameters"]
    return (np.array(par["beta"]["estimate"]),
            np.array(par["rho"]),
            np.array(par["power"]),
            [np.array(t) for t in par["tau"]])
