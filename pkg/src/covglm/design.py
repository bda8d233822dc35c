"""Design construction: mean-model term grammar and covariance component grammar.

Term grammar (per response)
    col            main effect (treatment-coded if categorical, as-is if numeric)
    col^k          polynomial trend: powers 1..k of the centered numeric column
    a:b            interaction of two sides (each a main effect or polynomial);
                   its columns are all pairwise products of the coded sides

Covariance component grammar
    identity
    exchangeable            all rows of a group exchangeable
    exchangeable(col)       rows of a group with equal col values exchangeable
    ma(k)                   band structure at lag k on the time column
    inverse_distance        1/|t_i - t_j| within groups
    covariate(col)          rank-one a a' from a numeric column
    covariate(col=Level)    rank-one from a level indicator
    interaction(c1, c2)     symmetrized a b' + b a' of two covariate specs
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .exceptions import SpecificationError
from .selection import ResponseSpec, SelectionProblem, TermBlock
from .structures import (GroupIndex, build_covariate_block, build_covariate_interaction,
                         build_exchangeable, build_identity, build_inverse_distance,
                         build_ma_band)
from .estimation import ModelMatrices

__all__ = [
    "DesignInfo",
    "encode_term",
    "intercept_term",
    "parse_component",
    "component_label",
    "build_component",
    "build_components",
    "build_model_matrices",
    "build_selection_problem",
    "term_index_map",
]


@dataclass
class DesignInfo:
    """Construction record: centering constants and the term blocks used."""

    centers: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)        # response name -> [TermBlock]
    components: dict = field(default_factory=dict)   # response name -> [labels]


# -- mean-model terms ---------------------------------------------------------------

_POLY = re.compile(r"^([^\^:]+)\^(\d+)$")


def _column_kind(dataset: Dataset, col: str) -> str:
    schema = dataset.schema
    if col not in dataset.frame.columns:
        raise SpecificationError(f"formula references unknown column {col!r}")
    if col in schema.categorical or col == schema.group:
        return "factor"
    if np.issubdtype(dataset.frame[col].dtype, np.number):
        return "numeric"
    raise SpecificationError(
        f"column {col!r} is neither declared categorical nor numeric")


def _center(dataset: Dataset, col: str, centers: dict) -> float:
    if col not in centers:
        centers[col] = float(dataset.frame[col].to_numpy(dtype=float).mean())
    return centers[col]


def _encode_side(dataset: Dataset, expr: str, centers: dict):
    """One interaction side or main effect -> (label, names, matrix)."""
    expr = expr.strip()
    m = _POLY.match(expr)
    if m:
        col, degree = m.group(1).strip(), int(m.group(2))
        if degree < 1:
            raise SpecificationError(f"polynomial degree must be >= 1 in {expr!r}")
        if _column_kind(dataset, col) != "numeric":
            raise SpecificationError(f"{col!r} must be numeric for a polynomial term")
        c = _center(dataset, col, centers)
        x = dataset.frame[col].to_numpy(dtype=float) - c
        mat = np.column_stack([x ** j for j in range(1, degree + 1)])
        names = [f"{col}^{j}" for j in range(1, degree + 1)]
        return f"{col}^{degree}", names, mat
    kind = _column_kind(dataset, expr)
    if kind == "numeric":
        return expr, [expr], dataset.frame[expr].to_numpy(dtype=float)[:, None]
    levels = dataset.levels[expr]
    if len(levels) < 2:
        raise SpecificationError(f"factor {expr!r} has a single level")
    vals = dataset.frame[expr].to_numpy()
    mat = np.column_stack([(vals == lv).astype(float) for lv in levels[1:]])
    names = [f"{expr}[{lv}]" for lv in levels[1:]]
    return expr, names, mat


def encode_term(dataset: Dataset, expr: str, centers: dict = None) -> TermBlock:
    """Encode one formula term into a labelled column block.

    Interactions carry hierarchy links: ``a:b`` requires the terms labelled
    ``a`` and ``b`` to stay active during backward elimination.
    """
    centers = {} if centers is None else centers
    expr = expr.strip()
    if ":" in expr:
        parts = expr.split(":")
        if len(parts) != 2:
            raise SpecificationError(
                f"only second-order interactions are supported, got {expr!r}")
        la, na, ma = _encode_side(dataset, parts[0], centers)
        lb, nb, mb = _encode_side(dataset, parts[1], centers)
        cols, names = [], []
        for i, ni in enumerate(na):
            for j, nj in enumerate(nb):
                cols.append(ma[:, i] * mb[:, j])
                names.append(f"{ni}:{nj}")
        return TermBlock(label=f"{la}:{lb}", column_names=tuple(names),
                         matrix=np.column_stack(cols), requires=(la, lb))
    label, names, mat = _encode_side(dataset, expr, centers)
    return TermBlock(label=label, column_names=tuple(names), matrix=mat)


def intercept_term(n: int) -> TermBlock:
    return TermBlock(label="intercept", column_names=("intercept",),
                     matrix=np.ones((n, 1)))


# -- covariance components ----------------------------------------------------------

_SPEC = re.compile(r"^\s*([A-Za-z_][\w]*)\s*(?:\((.*)\))?\s*$", re.S)


def _split_args(text: str):
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur or parts:
        parts.append("".join(cur))
    return [p.strip() for p in parts]


def parse_component(text: str):
    """Parse one covariance component spec into a normalized tuple."""
    m = _SPEC.match(text)
    if not m:
        raise SpecificationError(f"cannot parse covariance component {text!r}")
    name, argtext = m.group(1), m.group(2)
    args = _split_args(argtext) if argtext is not None else None

    if name == "identity":
        if args:
            raise SpecificationError("identity takes no arguments")
        return ("identity",)
    if name == "exchangeable":
        if not args:
            return ("exchangeable", None)
        if len(args) != 1:
            raise SpecificationError("exchangeable takes at most one column")
        return ("exchangeable", args[0])
    if name == "ma":
        if not args or len(args) != 1 or not args[0].isdigit() or int(args[0]) < 1:
            raise SpecificationError(f"ma needs a positive integer lag, got {text!r}")
        return ("ma", int(args[0]))
    if name == "inverse_distance":
        if args:
            raise SpecificationError("inverse_distance takes no arguments")
        return ("inverse_distance",)
    if name == "covariate":
        if not args or len(args) != 1:
            raise SpecificationError("covariate takes exactly one argument")
        col, eq, level = args[0].partition("=")
        return ("covariate", col.strip(), level.strip() if eq else None)
    if name == "interaction":
        if not args or len(args) != 2:
            raise SpecificationError("interaction takes exactly two covariate specs")
        inner = tuple(parse_component(a) for a in args)
        for node in inner:
            if node[0] != "covariate":
                raise SpecificationError(
                    "interaction arguments must be covariate(...) specs")
        return ("interaction",) + inner
    raise SpecificationError(f"unknown covariance component {name!r}")


def component_label(node) -> str:
    kind = node[0]
    if kind == "identity" or kind == "inverse_distance":
        return kind
    if kind == "exchangeable":
        return "exchangeable" if node[1] is None else f"exchangeable({node[1]})"
    if kind == "ma":
        return f"ma({node[1]})"
    if kind == "covariate":
        col, level = node[1], node[2]
        return f"covariate({col})" if level is None else f"covariate({col}={level})"
    return f"interaction({component_label(node[1])},{component_label(node[2])})"


def _covariate_values(dataset: Dataset, node) -> np.ndarray:
    _, col, level = node
    if col not in dataset.frame.columns:
        raise SpecificationError(f"covariance component references unknown column {col!r}")
    if level is None:
        if _column_kind(dataset, col) != "numeric":
            raise SpecificationError(
                f"covariate({col}) needs a numeric column; use {col}=<level> for factors")
        return dataset.frame[col].to_numpy(dtype=float)
    values = dataset.frame[col].astype(str).to_numpy()
    if level not in values:
        raise SpecificationError(f"level {level!r} never occurs in column {col!r}")
    return (values == level).astype(float)


def build_component(dataset: Dataset, groups: GroupIndex, spec,
                    time_scale: str = "rank"):
    """Materialize one component spec as a KnownMatrix over ``groups``."""
    node = parse_component(spec) if isinstance(spec, str) else spec
    label = component_label(node)
    kind = node[0]
    if kind == "identity":
        return build_identity(groups)
    if kind == "exchangeable":
        key = None
        if node[1] is not None:
            if node[1] not in dataset.frame.columns:
                raise SpecificationError(
                    f"exchangeable key column {node[1]!r} not in the data")
            key = dataset.frame[node[1]].to_numpy()
        return build_exchangeable(groups, key=key, label=label)
    if kind in ("ma", "inverse_distance") and dataset.schema.time is None:
        raise SpecificationError(f"{label} needs a time column in the data schema")
    if kind == "ma":
        return build_ma_band(groups, node[1], time_scale=time_scale, label=label)
    if kind == "inverse_distance":
        return build_inverse_distance(groups, label=label)
    if kind == "covariate":
        return build_covariate_block(groups, _covariate_values(dataset, node), label=label)
    a = _covariate_values(dataset, node[1])
    b = _covariate_values(dataset, node[2])
    return build_covariate_interaction(groups, a, b, label=label)


def build_components(dataset: Dataset, groups: GroupIndex, specs,
                     time_scale: str = "rank"):
    return [build_component(dataset, groups, s, time_scale) for s in specs]


# -- full model assembly --------------------------------------------------------------

def _response_terms(dataset: Dataset, exprs, centers) -> list:
    terms = [intercept_term(dataset.n)]
    for expr in exprs:
        if expr.strip() == "1":
            continue
        terms.append(encode_term(dataset, expr, centers))
    labels = [t.label for t in terms]
    if len(set(labels)) != len(labels):
        raise SpecificationError(f"duplicate formula terms: {labels}")
    return terms


def build_model_matrices(dataset: Dataset, config):
    """Assemble fit-ready matrices for the configured model.

    Returns (ModelMatrices, DesignInfo). Deterministic given data and
    config: no iteration-order dependence enters the design.
    """
    groups = dataset.group_index()
    info = DesignInfo()
    names, ys, designs, coef_names = [], [], [], []
    offsets, comps, powers, starts = [], [], [], []
    for rc in config.responses:
        terms = _response_terms(dataset, rc.mean, info.centers)
        comp = build_components(dataset, groups, rc.covariance, config.ma_time_scale)
        info.terms[rc.name] = terms
        info.components[rc.name] = [c.label for c in comp]
        names.append(rc.name)
        ys.append(dataset.frame[rc.name].to_numpy(dtype=float))
        designs.append(np.column_stack([t.matrix for t in terms]))
        cn = []
        for t in terms:
            cn.extend(t.column_names)
        coef_names.append(cn)
        offsets.append(dataset.log_offset())
        comps.append(comp)
        powers.append(rc.power)
        starts.append(getattr(rc, "power_start", 1.5) if rc.power is None else rc.power)
    mm = ModelMatrices(groups=groups, response_names=names, y=ys, design=designs,
                       coef_names=coef_names, offset=offsets, components=comps,
                       power_fixed=powers, power_start=starts)
    return mm, info


def build_selection_problem(dataset: Dataset, config):
    """Assemble the stepwise-selection inputs.

    Per response: base terms (always kept, intercept first), candidate
    terms, base components (identity first) and candidate components.
    """
    groups = dataset.group_index()
    info = DesignInfo()
    responses = []
    for rc in config.responses:
        base_terms = _response_terms(dataset, rc.mean, info.centers)
        known = {t.label for t in base_terms}
        cand_terms = []
        for expr in rc.candidate_mean:
            t = encode_term(dataset, expr, info.centers)
            if t.label in known:
                raise SpecificationError(
                    f"candidate term {t.label!r} already in the base mean model")
            known.add(t.label)
            cand_terms.append(t)
        base_comp = build_components(dataset, groups, rc.covariance,
                                     config.ma_time_scale)
        cand_comp = build_components(dataset, groups, rc.candidate_covariance,
                                     config.ma_time_scale)
        info.terms[rc.name] = base_terms + cand_terms
        info.components[rc.name] = ([c.label for c in base_comp]
                                    + [c.label for c in cand_comp])
        responses.append(ResponseSpec(
            name=rc.name, y=dataset.frame[rc.name].to_numpy(dtype=float),
            offset=dataset.log_offset(), base_terms=base_terms,
            candidate_terms=cand_terms, base_components=base_comp,
            candidate_components=cand_comp, power_fixed=rc.power))
    return SelectionProblem(groups=groups, responses=responses), info


def term_index_map(mm: ModelMatrices, info: DesignInfo):
    """Match known term blocks against a (possibly reduced) fitted design.

    Returns (display label, global coefficient indices) pairs for every
    term whose columns all survived selection, suitable for joint Wald
    tests per effect.
    """
    out = []
    for r, name in enumerate(mm.response_names):
        start = mm.beta_slices()[r].start
        present = {c: i for i, c in enumerate(mm.coef_names[r])}
        for t in info.terms.get(name, []):
            if all(c in present for c in t.column_names):
                idx = [start + present[c] for c in t.column_names]
                out.append((f"{name}:{t.label}", idx))
    return out
