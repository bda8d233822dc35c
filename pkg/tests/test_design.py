"""Design construction: term grammar, component grammar, full assembly."""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from covglm.config import parse_config
from covglm.data import DataSchema, Dataset, load_dataset
from covglm.design import (build_component, build_model_matrices,
                           build_selection_problem, component_label, encode_term,
                           parse_component, term_index_map)
from covglm.exceptions import SpecificationError
from covglm.structures import dense_from_blocks


def make_dataset(n_hunters=6, n_months=8, seed=5, n_alt=3):
    rng = np.random.default_rng(seed)
    rows = []
    for h in range(n_hunters):
        for m in range(1, n_months + 1):
            rows.append({
                "hunter": f"h{h}",
                "month": float(m),
                "days": float(rng.integers(1, 9)),
                "sex": ["F", "M"][h % 2],
                "method": ["gun", "trap"][(h + m) % 2],
                "alt": [f"a{k}" for k in range(n_alt)][(h + 2 * m) % n_alt],
                "y1": int(rng.poisson(3.0)),
                "y2": int(rng.poisson(1.5)),
            })
    frame = pd.DataFrame(rows)
    schema = DataSchema(group="hunter", responses=("y1", "y2"), time="month",
                        offset="days", categorical=("sex", "method", "alt"))
    levels = {c: tuple(pd.unique(frame[c])) for c in ("sex", "method", "alt", "hunter")}
    return Dataset(frame=frame, schema=schema, levels=levels)


DS = make_dataset()


# -- term grammar --------------------------------------------------------------------


def test_factor_main_effect_treatment_coding():
    term = encode_term(DS, "alt")
    levels = DS.levels["alt"]
    assert term.label == "alt"
    assert term.column_names == tuple(f"alt[{lv}]" for lv in levels[1:])
    vals = DS.frame["alt"].to_numpy()
    for j, lv in enumerate(levels[1:]):
        assert_array_equal(term.matrix[:, j], (vals == lv).astype(float))


def test_numeric_main_effect_is_raw_column():
    term = encode_term(DS, "month")
    assert term.column_names == ("month",)
    assert_array_equal(term.matrix[:, 0], DS.frame["month"].to_numpy())


def test_polynomial_term_uses_centered_powers():
    centers = {}
    term = encode_term(DS, "month^3", centers)
    m = DS.frame["month"].to_numpy()
    c = m.mean()
    assert centers == {"month": c}
    assert term.label == "month^3"
    assert term.column_names == ("month^1", "month^2", "month^3")
    for j in range(3):
        assert_allclose(term.matrix[:, j], (m - c) ** (j + 1), rtol=1e-14)


def test_interaction_columns_are_products():
    term = encode_term(DS, "sex:method")
    sex = (DS.frame["sex"].to_numpy() == DS.levels["sex"][1]).astype(float)
    met = (DS.frame["method"].to_numpy() == DS.levels["method"][1]).astype(float)
    assert term.requires == ("sex", "method")
    assert term.df == 1
    assert_array_equal(term.matrix[:, 0], sex * met)


def test_factor_by_polynomial_interaction_df():
    term = encode_term(DS, "alt:month^2")
    assert term.df == 2 * 2   # (3 levels - 1) x 2 powers
    assert term.requires == ("alt", "month^2")
    names = term.column_names
    assert names[0].startswith("alt[") and names[0].endswith(":month^1")


def test_term_errors():
    with pytest.raises(SpecificationError, match="unknown column"):
        encode_term(DS, "altitude")
    with pytest.raises(SpecificationError, match="second-order"):
        encode_term(DS, "a:b:c")
    with pytest.raises(SpecificationError, match="numeric for a polynomial"):
        encode_term(DS, "sex^2")


# -- published-scale design width ------------------------------------------------------


def test_full_interaction_design_has_26_columns():
    # intercept 1 + method 1 + alt 4 + sex 1 + cubic trend 3
    #  + method:alt 4 + alt:(cubic trend) 12  ->  26
    ds = make_dataset(n_alt=5)
    cfg = parse_config({
        "data": {"group": "hunter", "time": "month", "offset": "days",
                 "categorical": ["sex", "method", "alt"]},
        "responses": [{"name": "y1",
                       "mean": ["method", "alt", "sex", "month^3",
                                "method:alt", "alt:month^3"],
                       "covariance": ["identity"], "power": "fixed=1.5"}],
    })
    mm, info = build_model_matrices(ds, cfg)
    assert mm.design[0].shape[1] == 1 + 1 + 4 + 1 + 3 + 4 + 12 == 26
    assert [t.df for t in info.terms["y1"]] == [1, 1, 4, 1, 3, 4, 12]


def test_alt_main_effect_gives_four_indicators_plus_intercept():
    ds = make_dataset(n_alt=5)
    cfg = parse_config({
        "data": {"group": "hunter", "categorical": ["alt"]},
        "responses": [{"name": "y1", "mean": ["alt"],
                       "covariance": ["identity"], "power": "fixed=1.5"}],
    })
    mm, _ = build_model_matrices(ds, cfg)
    assert mm.design[0].shape[1] == 5
    assert mm.coef_names[0][0] == "intercept"
    assert all(c.startswith("alt[") for c in mm.coef_names[0][1:])


# -- component grammar ----------------------------------------------------------------


def test_component_parse_and_labels():
    cases = {
        "identity": ("identity",),
        "exchangeable": ("exchangeable", None),
        "exchangeable(month)": ("exchangeable", "month"),
        "ma(2)": ("ma", 2),
        "inverse_distance": ("inverse_distance",),
        "covariate(days)": ("covariate", "days", None),
        "covariate(method=trap)": ("covariate", "method", "trap"),
        "interaction(covariate(days), covariate(method=trap))":
            ("interaction", ("covariate", "days", None),
             ("covariate", "method", "trap")),
    }
    for text, node in cases.items():
        assert parse_component(text) == node
        assert parse_component(component_label(node)) == node


def test_component_parse_errors():
    for bad in ["ma(0)", "ma(x)", "ma", "identity(3)", "warp", "covariate",
                "interaction(identity, covariate(days))",
                "interaction(covariate(days))", "exchangeable(a,b)"]:
        with pytest.raises(SpecificationError):
            parse_component(bad)
    with pytest.raises(SpecificationError):
        build_component(DS, DS.group_index(), "covariate(sex)")  # factor needs =level


def test_covariate_component_is_outer_product():
    gi = DS.group_index()
    km = build_component(DS, gi, "covariate(method=trap)")
    ind = (DS.frame["method"].to_numpy() == "trap").astype(float)
    dense = dense_from_blocks(km, gi)
    want = np.zeros_like(dense)
    for idx in gi.rows:
        want[np.ix_(idx, idx)] = np.outer(ind[idx], ind[idx])
    assert_array_equal(dense, want)
    assert km.label == "covariate(method=trap)"


def test_interaction_component_is_symmetrized():
    gi = DS.group_index()
    km = build_component(DS, gi, "interaction(covariate(days),covariate(method=trap))")
    a = DS.frame["days"].to_numpy(dtype=float)
    b = (DS.frame["method"].to_numpy() == "trap").astype(float)
    dense = dense_from_blocks(km, gi)
    want = np.zeros_like(dense)
    for idx in gi.rows:
        want[np.ix_(idx, idx)] = np.outer(a[idx], b[idx]) + np.outer(b[idx], a[idx])
    assert_array_equal(dense, want)


def test_exchangeable_key_component_matches_cells():
    gi = DS.group_index()
    km = build_component(DS, gi, "exchangeable(month)")
    month = DS.frame["month"].to_numpy()
    for g, idx in enumerate(gi.rows):
        want = (month[idx][:, None] == month[idx][None, :]).astype(float)
        assert_array_equal(km.blocks[g], want)


def test_selected_structure_style_component_list():
    gi = DS.group_index()
    specs = ["identity", "exchangeable(month)", "covariate(method=trap)",
             "inverse_distance"]
    comps = [build_component(DS, gi, s) for s in specs]
    assert [c.label for c in comps] == specs
    assert len(comps) == 4


def test_unknown_level_and_column_errors():
    gi = DS.group_index()
    with pytest.raises(SpecificationError, match="never occurs"):
        build_component(DS, gi, "covariate(method=net)")
    with pytest.raises(SpecificationError, match="unknown column"):
        build_component(DS, gi, "covariate(weight)")
    with pytest.raises(SpecificationError, match="key column"):
        build_component(DS, gi, "exchangeable(week)")


# -- full assembly --------------------------------------------------------------------


def base_config(**sel):
    return parse_config({
        "data": {"group": "hunter", "time": "month", "offset": "days",
                 "categorical": ["sex", "method", "alt"]},
        "responses": [
            {"name": "y1", "mean": ["sex", "method"],
             "covariance": ["identity", "exchangeable(month)"],
             "candidate_mean": ["alt"], "candidate_covariance": ["ma(1)"],
             "power": "fixed=1.5"},
            {"name": "y2", "mean": ["sex"],
             "covariance": ["identity"], "candidate_covariance": ["exchangeable"],
             "power": "estimate"},
        ],
        **sel,
    })


def test_build_model_matrices_shapes_and_offset():
    mm, info = build_model_matrices(DS, base_config())
    assert mm.n_responses == 2
    assert mm.response_names == ["y1", "y2"]
    assert_array_equal(mm.offset[0], np.log(DS.frame["days"].to_numpy()))
    assert mm.power_fixed == [1.5, None]
    assert info.components["y1"] == ["identity", "exchangeable(month)"]
    assert mm.coef_names[0] == ["intercept", "sex[F]", "method[gun]"] or \
        mm.coef_names[0][0] == "intercept"


def test_double_build_is_identical():
    mm1, _ = build_model_matrices(DS, base_config())
    mm2, _ = build_model_matrices(DS, base_config())
    for r in range(2):
        assert_array_equal(mm1.design[r], mm2.design[r])
        assert mm1.coef_names[r] == mm2.coef_names[r]
        for a, b in zip(mm1.components[r], mm2.components[r]):
            assert a.label == b.label
            for ba, bb in zip(a.blocks, b.blocks):
                assert_array_equal(ba, bb)


def test_build_selection_problem_splits_base_and_candidates():
    problem, info = build_selection_problem(DS, base_config())
    spec = problem.responses[0]
    assert [t.label for t in spec.base_terms] == ["intercept", "sex", "method"]
    assert [t.label for t in spec.candidate_terms] == ["alt"]
    assert [c.label for c in spec.base_components] == ["identity",
                                                       "exchangeable(month)"]
    assert [c.label for c in spec.candidate_components] == ["ma(1)"]
    assert spec.power_fixed == 1.5
    assert problem.responses[1].power_fixed is None
    assert info.terms["y1"][-1].label == "alt"


def test_candidate_term_duplicating_base_is_rejected():
    cfg = base_config()
    bad = cfg.responses[0]
    object.__setattr__(bad, "candidate_mean", ("sex",))
    with pytest.raises(SpecificationError, match="already in the base"):
        build_selection_problem(DS, cfg)


def test_duplicate_mean_terms_rejected():
    cfg = parse_config({
        "data": {"group": "hunter", "categorical": ["sex"]},
        "responses": [{"name": "y1", "mean": ["sex", "sex"],
                       "covariance": ["identity"], "power": "fixed=1.5"}],
    })
    with pytest.raises(SpecificationError, match="duplicate formula terms"):
        build_model_matrices(DS, cfg)


def test_aliased_columns_reported_at_fit():
    # raw month plus centered month^1 is collinear with the intercept
    from covglm.estimation import fit
    cfg = parse_config({
        "data": {"group": "hunter", "time": "month", "offset": "days",
                 "categorical": ["sex"]},
        "responses": [{"name": "y1", "mean": ["month", "month^1"],
                       "covariance": ["identity"], "power": "fixed=1.5"}],
    })
    mm, _ = build_model_matrices(DS, cfg)
    with pytest.raises(SpecificationError, match="aliased columns"):
        fit(mm)


def test_term_index_map_matches_layout():
    mm, info = build_model_matrices(DS, base_config())
    pairs = dict(term_index_map(mm, info))
    assert pairs["y1:intercept"] == [0]
    assert pairs["y1:sex"] == [1]
    assert pairs["y1:method"] == [2]
    k1 = mm.design[0].shape[1]
    assert pairs["y2:intercept"] == [k1]
    assert pairs["y2:sex"] == [k1 + 1]


def test_term_index_map_skips_dropped_terms():
    mm, info = build_model_matrices(DS, base_config())
    # simulate a reduced refit: drop y1's method column
    reduced_cfg = base_config()
    mm2, _ = build_model_matrices(DS, reduced_cfg)
    mm2.design[0] = mm2.design[0][:, :2]
    mm2.coef_names[0] = mm2.coef_names[0][:2]
    labels = [lab for lab, _ in term_index_map(mm2, info)]
    assert "y1:method" not in labels
    assert "y1:sex" in labels
