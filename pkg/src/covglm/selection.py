"""Score-information-criterion forward selection and Wald backward elimination.

The generalized score statistic evaluates candidate dispersion components
at the base fit only: the full Pearson system (score, sensitivity,
variability) is computed at tau-tilde = (tau-hat, 0) and partitioned into
active and candidate blocks,

    Var(psi_2) = V22 - S21 S11^-1 V12 - V21 S11^-1 S12
                 + S21 S11^-1 V11 S11^-1 S12,
    T = psi_2' Var(psi_2)^-1 psi_2,

which is chi-square(s) under the null. The same machinery drives mean-term
forward selection: with the model-based sensitivity -V for the regression
score, the partitioned variance collapses to the classical score-test form
V22 - V21 V11^-1 V12.

SIC = -T + delta * |tau| penalizes by the active-plus-candidate parameter
count; forward steps stop as soon as the best candidate's SIC is positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .covariance import DispersionState
from .estimation import (
    FittedModel,
    LambdaLayout,
    ModelMatrices,
    assemble_covariance,
    fit,
    linear_predictors,
    pearson_system,
    quasi_score,
    stacked_residual,
)
from .exceptions import CovglmError, SpecificationError
from .structures import GroupIndex

__all__ = [
    "ScoreTest",
    "WaldResult",
    "TermBlock",
    "ResponseSpec",
    "SelectionProblem",
    "SelectionTrace",
    "score_test_dispersion",
    "score_test_mean",
    "sic_value",
    "sic_one_step",
    "sic_table",
    "sic_sequential",
    "wald_test",
    "wald_quadform",
    "stepwise_workflow",
]


@dataclass(frozen=True)
class ScoreTest:
    """Generalized score statistic with its partition diagnostics."""

    statistic: float
    df: int
    p_value: float
    psi2: np.ndarray
    var_psi2: np.ndarray
    asymmetry: float
    used_pseudo_inverse: bool


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float


def _psd_quadform(psi2: np.ndarray, var: np.ndarray):
    """Quadratic form against the symmetrized, eigenvalue-thresholded weight.

    Always nonnegative: negative or numerically zero eigendirections are
    dropped (pseudo-inverse path) rather than inverted.
    """
    var_s = (var + var.T) / 2.0
    scale = max(np.max(np.abs(var_s)), 1e-300)
    asym = float(np.max(np.abs(var - var.T)) / scale)
    eigval, eigvec = np.linalg.eigh(var_s)
    tol = 1e-12 * max(eigval.max(), 0.0)
    keep = eigval > tol
    used_pinv = bool(np.any(~keep))
    if not np.any(keep):
        return 0.0, var_s, asym, True
    proj = eigvec[:, keep].T @ psi2
    t = float(np.sum(proj ** 2 / eigval[keep]))
    return t, var_s, asym, used_pinv


def _partitioned_variance(psi, sens, var, active, cand):
    s11 = sens[np.ix_(active, active)]
    s12 = sens[np.ix_(active, cand)]
    s21 = sens[np.ix_(cand, active)]
    v11 = var[np.ix_(active, active)]
    v12 = var[np.ix_(active, cand)]
    v21 = var[np.ix_(cand, active)]
    v22 = var[np.ix_(cand, cand)]
    a = np.linalg.solve(s11, v12)      # S11^-1 V12
    b = np.linalg.solve(s11, s12)      # S11^-1 S12
    out = v22 - s21 @ a - v21 @ b + s21 @ np.linalg.solve(s11, v11 @ b)
    return psi[cand], out


def _extended_problem(fitted: FittedModel, candidates):
    """Model and state with candidate components appended at zero coefficients."""
    mm = fitted.model
    comps = [list(c) for c in mm.components]
    for r, km in candidates:
        comps[r].append(km)
    ext_mm = ModelMatrices(
        groups=mm.groups, response_names=mm.response_names, y=mm.y,
        design=mm.design, coef_names=mm.coef_names, offset=mm.offset,
        components=comps, power_fixed=mm.power_fixed, power_start=mm.power_start)
    tau = [t.copy() for t in fitted.state.tau]
    positions = []
    for r, _ in candidates:
        tau[r] = np.append(tau[r], 0.0)
        positions.append((r, tau[r].shape[0] - 1))
    ext_state = DispersionState(rho=fitted.state.rho, power=fitted.state.power,
                                tau=tuple(tau))
    return ext_mm, ext_state, positions


def score_test_dispersion(fitted: FittedModel, candidates) -> ScoreTest:
    """Generalized score test for appending covariance components.

    ``candidates`` is a sequence of (response_index, KnownMatrix) pairs.
    Evaluated entirely at the base fit; never fits a candidate model.
    """
    if not candidates:
        raise SpecificationError("score test needs at least one candidate component")
    ext_mm, ext_state, positions = _extended_problem(fitted, candidates)
    layout = LambdaLayout(ext_mm)
    cov = assemble_covariance(ext_mm, fitted.beta, ext_state)
    resid = fitted.residual
    psi, sens, var = pearson_system(ext_mm, resid, cov, layout.params,
                                    want_variability=True)
    cand_idx = [layout.index_of("tau", r, d) for r, d in positions]
    active_idx = [i for i in range(len(layout)) if i not in set(cand_idx)]
    psi2, var_psi2 = _partitioned_variance(psi, sens, var, active_idx, cand_idx)
    t, var_s, asym, used_pinv = _psd_quadform(psi2, var_psi2)
    df = len(cand_idx)
    return ScoreTest(statistic=t, df=df, p_value=float(stats.chi2.sf(t, df)),
                     psi2=psi2, var_psi2=var_s, asymmetry=asym,
                     used_pseudo_inverse=used_pinv)


def score_test_mean(fitted: FittedModel, response: int, columns: np.ndarray,
                    names=None) -> ScoreTest:
    """Score test for appending mean-model columns to one response.

    Uses the regression estimating function, whose sensitivity equals minus
    its variability, so the partitioned variance reduces to the classical
    V22 - V21 V11^-1 V12 form.
    """
    mm = fitted.model
    columns = np.atleast_2d(np.asarray(columns, dtype=float))
    if columns.shape[0] != mm.n:
        columns = columns.T
    s = columns.shape[1]
    if names is None:
        names = [f"cand{j}" for j in range(s)]
    design = [x.copy() for x in mm.design]
    coef_names = [list(c) for c in mm.coef_names]
    design[response] = np.column_stack([design[response], columns])
    coef_names[response] = coef_names[response] + list(names)
    ext_mm = ModelMatrices(
        groups=mm.groups, response_names=mm.response_names, y=mm.y,
        design=design, coef_names=coef_names, offset=mm.offset,
        components=mm.components, power_fixed=mm.power_fixed,
        power_start=mm.power_start)
    beta_ext = np.zeros(ext_mm.n_coef)
    src = fitted.beta
    src_slices, dst_slices = mm.beta_slices(), ext_mm.beta_slices()
    for r in range(mm.n_responses):
        k_r = mm.design[r].shape[1]
        beta_ext[dst_slices[r]][:k_r] = src[src_slices[r]]
    cand_idx = [dst_slices[response].start + mm.design[response].shape[1] + j
                for j in range(s)]
    active_idx = [i for i in range(ext_mm.n_coef) if i not in set(cand_idx)]

    cov = assemble_covariance(ext_mm, beta_ext, fitted.state)
    _, mus = linear_predictors(ext_mm, beta_ext)
    resid = stacked_residual(ext_mm, mus)
    psi, sens = quasi_score(ext_mm, mus, resid, cov)
    vfull = -sens
    v11 = vfull[np.ix_(active_idx, active_idx)]
    v12 = vfull[np.ix_(active_idx, cand_idx)]
    v22 = vfull[np.ix_(cand_idx, cand_idx)]
    var_psi2 = v22 - v12.T @ np.linalg.solve(v11, v12)
    t, var_s, asym, used_pinv = _psd_quadform(psi[cand_idx], var_psi2)
    return ScoreTest(statistic=t, df=s, p_value=float(stats.chi2.sf(t, s)),
                     psi2=psi[cand_idx], var_psi2=var_s, asymmetry=asym,
                     used_pseudo_inverse=used_pinv)


# -- information criterion -----------------------------------------------------


def sic_value(statistic: float, n_parameters: int, delta: float) -> float:
    """SIC = -T + delta * parameter count."""
    return -float(statistic) + float(delta) * int(n_parameters)


def _active_tau_count(fitted: FittedModel) -> int:
    return sum(t.shape[0] for t in fitted.state.tau)


def sic_one_step(fitted: FittedModel, candidates, delta: float = 2.0) -> float:
    """One-step SIC for the whole candidate set, from the base fit alone."""
    if not candidates:
        return sic_value(0.0, _active_tau_count(fitted), delta)
    test = score_test_dispersion(fitted, candidates)
    return sic_value(test.statistic, _active_tau_count(fitted) + len(candidates), delta)


def sic_table(fitted: FittedModel, candidates, delta: float = 2.0) -> list:
    """Per-candidate one-step SIC rows plus a joint all-candidates row.

    Requires exactly the one base fit the caller already holds; this
    function never invokes fit().
    """
    rows = []
    n_tau = _active_tau_count(fitted)
    for r, km in candidates:
        test = score_test_dispersion(fitted, [(r, km)])
        rows.append({
            "response": fitted.model.response_names[r],
            "component": km.label,
            "statistic": test.statistic,
            "df": test.df,
            "p_value": test.p_value,
            "sic": sic_value(test.statistic, n_tau + 1, delta),
            "pseudo_inverse": test.used_pseudo_inverse,
        })
    if len(candidates) > 1:
        joint = score_test_dispersion(fitted, list(candidates))
        rows.append({
            "response": "(all)",
            "component": "(joint)",
            "statistic": joint.statistic,
            "df": joint.df,
            "p_value": joint.p_value,
            "sic": sic_value(joint.statistic, n_tau + len(candidates), delta),
            "pseudo_inverse": joint.used_pseudo_inverse,
        })
    return rows


def _refit_with_components(fitted: FittedModel, accepted, **fit_kwargs) -> FittedModel:
    ext_mm, _, _ = _extended_problem(fitted, accepted)
    return fit(ext_mm, **fit_kwargs)


def sic_sequential(fitted: FittedModel, candidates, delta: float = 2.0,
                   **fit_kwargs):
    """Sequential SIC: greedy one-parameter increments with refits.

    Returns (sic, order, diagnostics): the summed maximal score statistics
    penalized by delta times the active-plus-candidate parameter count, the
    greedy acceptance order, and any skip diagnostics. At most one fit per
    candidate is attempted.
    """
    fit_kwargs.setdefault("compute_vcov", False)
    n_total = _active_tau_count(fitted) + len(candidates)
    remaining = list(candidates)
    accepted = []
    order = []
    diagnostics = []
    total_t = 0.0
    base = fitted
    while remaining:
        tests = [score_test_dispersion(base, [c]).statistic for c in remaining]
        best = int(np.argmax(tests))
        cand = remaining.pop(best)
        if remaining:
            try:
                base = _refit_with_components(base, [cand], **fit_kwargs)
            except CovglmError as exc:
                diagnostics.append({"component": cand[1].label, "error": str(exc)})
                continue
        total_t += tests[best]
        order.append(cand)
    return sic_value(total_t, n_total, delta), order, diagnostics


# -- Wald tests --------------------------------------------------------------------


def wald_quadform(theta: np.ndarray, vcov: np.ndarray) -> WaldResult:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    vcov = np.atleast_2d(np.asarray(vcov, dtype=float))
    df = theta.shape[0]
    if not np.any(theta):
        return WaldResult(0.0, df, 1.0)
    try:
        w = float(theta @ np.linalg.solve(vcov, theta))
    except np.linalg.LinAlgError:
        raise SpecificationError("singular covariance block in Wald test") from None
    if not np.isfinite(w):
        raise SpecificationError("singular covariance block in Wald test")
    return WaldResult(w, df, float(stats.chi2.sf(w, df)))


def wald_test(fitted: FittedModel, indices) -> WaldResult:
    """Wald chi-square for the joint nullity of the given parameter indices.

    Indices address the stacked (beta, lambda) vector; a single index gives
    the squared Z-statistic on 1 degree of freedom.
    """
    indices = list(indices)
    full = np.concatenate([fitted.beta, fitted.lam])
    theta = full[indices]
    sub = fitted.vcov[np.ix_(indices, indices)]
    return wald_quadform(theta, sub)


# -- workflow ------------------------------------------------------------------------


@dataclass(frozen=True)
class TermBlock:
    """One mean-model term: a labelled column block with hierarchy links."""

    label: str
    column_names: tuple
    matrix: np.ndarray = field(repr=False)
    requires: tuple = ()

    @property
    def df(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ResponseSpec:
    """Selection inputs for one response."""

    name: str
    y: np.ndarray
    offset: np.ndarray
    base_terms: list
    candidate_terms: list
    base_components: list
    candidate_components: list
    power_fixed: object = 1.5


@dataclass
class SelectionProblem:
    groups: GroupIndex
    responses: list


@dataclass
class SelectionTrace:
    """Verbatim record of every forward decision and backward removal."""

    steps: list = field(default_factory=list)

    def record(self, **kw):
        self.steps.append(kw)

    def to_jsonable(self) -> list:
        out = []
        for s in self.steps:
            out.append({k: (float(v) if isinstance(v, (np.floating, float)) else
                            int(v) if isinstance(v, (np.integer,)) else v)
                        for k, v in s.items()})
        return out


def _build_mm(problem: SelectionProblem, picks, response_subset=None) -> ModelMatrices:
    """Assemble ModelMatrices from per-response (terms, components) picks."""
    idx = range(len(problem.responses)) if response_subset is None else response_subset
    names, ys, designs, coef_names, offsets, comps, powers = [], [], [], [], [], [], []
    for r in idx:
        spec = problem.responses[r]
        terms, components = picks[r]
        names.append(spec.name)
        ys.append(spec.y)
        offsets.append(spec.offset)
        designs.append(np.column_stack([t.matrix for t in terms]))
        cn = []
        for t in terms:
            cn.extend(t.column_names)
        coef_names.append(cn)
        comps.append(list(components))
        powers.append(spec.power_fixed)
    return ModelMatrices(groups=problem.groups, response_names=names, y=ys,
                         design=designs, coef_names=coef_names, offset=offsets,
                         components=comps, power_fixed=powers)


def _term_indices(mm: ModelMatrices, terms_by_response, response: int, label: str):
    """Global stacked-beta indices of one labelled term."""
    offset = mm.beta_slices()[response].start
    pos = offset
    for t in terms_by_response[response]:
        if t.label == label:
            return list(range(pos, pos + t.df))
        pos += t.df
    raise SpecificationError(f"term {label!r} not active for response {response}")


def _forward_mean(problem, r, delta, trace, fit_kwargs):
    """Workflow step (i) for one response: forward mean selection, identity covariance."""
    spec = problem.responses[r]
    active = list(spec.base_terms)
    remaining = list(spec.candidate_terms)
    picks = {r: (active, spec.base_components[:1])}
    current = fit(_build_mm(problem, picks, [r]), compute_vcov=False, **fit_kwargs)
    while remaining:
        active_labels = {t.label for t in active}
        eligible = [t for t in remaining if set(t.requires) <= active_labels]
        if not eligible:
            trace.record(phase="mean-forward", response=spec.name, action="stop",
                         note="no eligible candidates")
            break
        k_active = sum(t.df for t in active)
        best = None
        for t in eligible:
            test = score_test_mean(current, 0, t.matrix, t.column_names)
            sic = sic_value(test.statistic, k_active + t.df, delta)
            if best is None or sic < best[1]:
                best = (t, sic, test)
        term, sic, test = best
        if sic > 0:
            trace.record(phase="mean-forward", response=spec.name, action="stop",
                         label=term.label, statistic=test.statistic, df=test.df,
                         sic=sic)
            break
        active.append(term)
        remaining.remove(term)
        trace.record(phase="mean-forward", response=spec.name, action="add",
                     label=term.label, statistic=test.statistic, df=test.df, sic=sic)
        picks = {r: (active, spec.base_components[:1])}
        current = fit(_build_mm(problem, picks, [r]), compute_vcov=False, **fit_kwargs)
    return active


def _forward_covariance(problem, r, mean_terms, delta, trace, fit_kwargs):
    """Workflow step (ii) for one response: forward matrix-linear-predictor selection."""
    spec = problem.responses[r]
    active = list(spec.base_components)
    remaining = list(spec.candidate_components)
    current = fit(_build_mm(problem, {r: (mean_terms, active)}, [r]),
                  compute_vcov=False, **fit_kwargs)
    while remaining:
        n_tau = len(active)
        tests = [score_test_dispersion(current, [(0, km)]) for km in remaining]
        stats_ = [t.statistic for t in tests]
        best = int(np.argmax(stats_))
        sic = sic_value(stats_[best], n_tau + 1, delta)
        if sic > 0:
            trace.record(phase="cov-forward", response=spec.name, action="stop",
                         label=remaining[best].label, statistic=stats_[best],
                         df=1, sic=sic)
            break
        km = remaining.pop(best)
        active.append(km)
        trace.record(phase="cov-forward", response=spec.name, action="add",
                     label=km.label, statistic=stats_[best], df=1, sic=sic)
        current = fit(_build_mm(problem, {r: (mean_terms, active)}, [r]),
                      compute_vcov=False, **fit_kwargs)
    return active


def _protected_labels(terms) -> set:
    out = set()
    for t in terms:
        out.update(t.requires)
    return out


def _backward(problem, picks, delta, threshold, trace, fit_kwargs):
    """Workflow step (iv): iterative Wald removal of non-significant effects."""
    current = fit(_build_mm(problem, picks), **fit_kwargs)
    while True:
        mm = current.model
        terms_by_response = {r: picks[r][0] for r in range(len(problem.responses))}
        removable = []
        for r, spec in enumerate(problem.responses):
            terms, comps = picks[r]
            base_labels = {t.label for t in spec.base_terms}
            protected = _protected_labels(terms)
            for t in terms:
                if t.label in base_labels or t.label in protected:
                    continue
                res = wald_test(current, _term_indices(mm, terms_by_response, r, t.label))
                removable.append((res.p_value, r, "term", t, res))
            base_comp_labels = {km.label for km in spec.base_components}
            for d, km in enumerate(comps):
                if km.label in base_comp_labels:
                    continue
                idx = mm.n_coef + current.lambda_index("tau", r, d)
                res = wald_test(current, [idx])
                removable.append((res.p_value, r, "component", km, res))
        weakest = max(removable, key=lambda x: x[0], default=None)
        if weakest is None or weakest[0] <= threshold:
            break
        p, r, kind, obj, res = weakest
        terms, comps = picks[r]
        if kind == "term":
            picks[r] = ([t for t in terms if t is not obj], comps)
        else:
            picks[r] = (terms, [km for km in comps if km is not obj])
        trace.record(phase="backward", response=problem.responses[r].name,
                     action="remove", label=obj.label, statistic=res.statistic,
                     df=res.df, p_value=p)
        current = fit(_build_mm(problem, picks), **fit_kwargs)
    return current, picks


def stepwise_workflow(problem: SelectionProblem, delta: float = 2.0,
                      wald_threshold: float = 0.05, **fit_kwargs):
    """Four-step model building: per-response mean selection with identity
    covariance, per-response covariance selection with the mean structure
    fixed, one joint multivariate fit, then backward Wald elimination.

    Returns (final FittedModel, SelectionTrace).
    """
    fit_kwargs.pop("compute_vcov", None)  # backward Wald steps need the sandwich
    trace = SelectionTrace()
    picks = {}
    for r, spec in enumerate(problem.responses):
        mean_terms = _forward_mean(problem, r, delta, trace, fit_kwargs)
        comps = _forward_covariance(problem, r, mean_terms, delta, trace, fit_kwargs)
        picks[r] = (mean_terms, comps)

    joint = fit(_build_mm(problem, picks), **fit_kwargs)
    trace.record(phase="joint-fit", action="fit",
                 n_parameters=int(joint.beta.size + joint.lam.size),
                 gpl=float(joint.gpl))
    final, picks = _backward(problem, picks, delta, wald_threshold, trace, fit_kwargs)
    return final, trace
