"""Configuration parsing: schema validation happens before any computation."""

import math

import pytest

from covglm.config import load_config, parse_config
from covglm.exceptions import SpecificationError


def doc(**overrides):
    base = {
        "data": {"group": "hunter", "time": "month", "offset": "days",
                 "categorical": ["sex", "method"]},
        "responses": [
            {"name": "y1", "mean": ["sex"], "covariance": ["identity", "ma(1)"],
             "candidate_covariance": ["exchangeable"], "power": "estimate"},
        ],
        "selection": {"penalty": "aic", "wald_threshold": 0.05},
        "fit": {"max_iter": 150, "tol": 1e-4},
    }
    base.update(overrides)
    return base


def test_full_document_round_trip():
    cfg = parse_config(doc())
    assert cfg.schema.group == "hunter"
    assert cfg.schema.responses == ("y1",)
    assert cfg.schema.offset == "days"
    assert cfg.responses[0].mean == ("sex",)
    assert cfg.responses[0].covariance == ("identity", "ma(1)")
    assert cfg.responses[0].power is None     # estimated
    assert cfg.penalty == "aic"
    assert cfg.max_iter == 150


def test_penalty_resolves_delta():
    assert parse_config(doc()).delta(500) == 2.0
    bic = parse_config(doc(selection={"penalty": "bic"}))
    assert bic.delta(500) == pytest.approx(math.log(500))


def test_inverse_covariance_link_rejected_at_parse():
    with pytest.raises(SpecificationError, match="not supported"):
        parse_config(doc(covariance_link="inverse"))


def test_identity_link_accepted():
    assert parse_config(doc(covariance_link="identity")).covariance_link == "identity"


def test_power_forms():
    d = doc()
    d["responses"][0]["power"] = "fixed=2"
    assert parse_config(d).responses[0].power == 2.0
    d["responses"][0]["power"] = 1.5
    assert parse_config(d).responses[0].power == 1.5
    d["responses"][0]["power"] = "wild"
    with pytest.raises(SpecificationError, match="power"):
        parse_config(d)


def test_covariance_must_start_with_identity():
    d = doc()
    d["responses"][0]["covariance"] = ["ma(1)", "identity"]
    with pytest.raises(SpecificationError, match="must start with 'identity'"):
        parse_config(d)


def test_identity_never_a_candidate():
    d = doc()
    d["responses"][0]["candidate_covariance"] = ["identity"]
    with pytest.raises(SpecificationError, match="must not contain 'identity'"):
        parse_config(d)


def test_default_covariance_is_identity_only():
    d = doc()
    del d["responses"][0]["covariance"]
    assert parse_config(d).responses[0].covariance == ("identity",)


def test_unknown_keys_rejected():
    with pytest.raises(SpecificationError, match="unknown top-level"):
        parse_config(doc(surprise=1))
    d = doc()
    d["responses"][0]["formula"] = "y ~ x"
    with pytest.raises(SpecificationError, match="unknown keys in response"):
        parse_config(d)


def test_duplicate_response_names_rejected():
    d = doc()
    d["responses"] = [d["responses"][0], dict(d["responses"][0])]
    with pytest.raises(SpecificationError, match="duplicate response"):
        parse_config(d)


def test_group_required():
    with pytest.raises(SpecificationError, match="data.group"):
        parse_config(doc(data={"time": "month"}))


def test_responses_required():
    with pytest.raises(SpecificationError, match="non-empty 'responses'"):
        parse_config(doc(responses=[]))


def test_bad_penalty_and_threshold():
    with pytest.raises(SpecificationError, match="penalty"):
        parse_config(doc(selection={"penalty": "dic"}))
    with pytest.raises(SpecificationError, match="wald_threshold"):
        parse_config(doc(selection={"wald_threshold": 1.5}))


def test_bad_time_scale():
    d = doc()
    d["data"]["ma_time_scale"] = "lunar"
    with pytest.raises(SpecificationError, match="ma_time_scale"):
        parse_config(d)


def test_mean_must_be_list_of_strings():
    d = doc()
    d["responses"][0]["mean"] = "sex"
    with pytest.raises(SpecificationError, match="list of strings"):
        parse_config(d)


def test_load_config_yaml(tmp_path):
    path = tmp_path / "m.yaml"
    path.write_text(
        "data:\n  group: g\n  offset: days\n"
        "responses:\n  - name: y\n    power: fixed=1.5\n",
        encoding="utf-8")
    cfg = load_config(path)
    assert cfg.schema.group == "g"
    assert cfg.responses[0].power == 1.5


def test_load_config_invalid_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("data: [unclosed\n", encoding="utf-8")
    with pytest.raises(SpecificationError, match="invalid YAML"):
        load_config(path)


def test_load_config_empty_file(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("", encoding="utf-8")
    with pytest.raises(SpecificationError, match="empty configuration"):
        load_config(path)
