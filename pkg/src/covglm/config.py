"""Model configuration: structured YAML document, schema-validated up front.

Layout::

    data:
      path: counts.csv            # optional, CLI --data overrides
      group: hunter
      time: month                 # optional
      offset: days                # optional
      categorical: [sex, method, alt]
      numeric: []                 # extra numeric covariates
      ma_time_scale: rank         # or calendar
    covariance_link: identity     # the only supported link
    responses:
      - name: y1
        mean: [sex, month^3]      # intercept is implicit
        covariance: [identity, exchangeable(month)]
        candidate_mean: []        # for select/score
        candidate_covariance: []
        power: estimate           # or a number to fix it
    selection:
      penalty: aic                # aic -> delta = 2, bic -> delta = log N
      wald_threshold: 0.05
    fit:
      max_iter: 200
      tol: 1.0e-4
      step_tol: 1.0e-6
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import yaml

from .data import DataSchema
from .exceptions import SpecificationError

__all__ = ["ResponseConfig", "ModelConfig", "parse_config", "load_config"]


@dataclass(frozen=True)
class ResponseConfig:
    name: str
    mean: tuple = ()
    covariance: tuple = ("identity",)
    candidate_mean: tuple = ()
    candidate_covariance: tuple = ()
    power: object = None         # None -> estimated, number -> fixed
    power_start: float = 1.5


@dataclass(frozen=True)
class ModelConfig:
    schema: DataSchema
    responses: tuple
    data_path: str = None
    ma_time_scale: str = "rank"
    covariance_link: str = "identity"
    penalty: str = "aic"
    wald_threshold: float = 0.05
    max_iter: int = 200
    tol: float = 1e-4
    step_tol: float = 1e-6
    seed: int = None

    def delta(self, n_obs: int) -> float:
        """Resolve the SIC penalty for a dataset of n_obs observations."""
        return 2.0 if self.penalty == "aic" else math.log(n_obs)


def _expect_mapping(obj, where):
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise SpecificationError(f"{where} must be a mapping, got {type(obj).__name__}")
    return obj


def _string_list(obj, where):
    if obj is None:
        return []
    if isinstance(obj, str):
        raise SpecificationError(f"{where} must be a list of strings, not one string")
    out = []
    for v in obj:
        if not isinstance(v, str):
            raise SpecificationError(f"{where} entries must be strings, got {v!r}")
        out.append(v)
    return out


def _parse_power(value, where):
    if value is None or value == "estimate":
        return None, 1.5
    if isinstance(value, str) and value.startswith("fixed="):
        value = value[len("fixed="):]
    try:
        return float(value), float(value)
    except (TypeError, ValueError):
        raise SpecificationError(
            f"{where}: power must be 'estimate', 'fixed=<value>' or a number, "
            f"got {value!r}") from None


def _parse_response(obj, used_names):
    obj = _expect_mapping(obj, "responses entry")
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise SpecificationError("every response needs a non-empty 'name'")
    if name in used_names:
        raise SpecificationError(f"duplicate response name {name!r}")
    used_names.add(name)

    covariance = _string_list(obj.get("covariance"), f"{name}.covariance") or ["identity"]
    if covariance[0] != "identity":
        raise SpecificationError(
            f"{name}.covariance must start with 'identity' (the baseline "
            f"dispersion component), got {covariance[0]!r} first")
    candidate_cov = _string_list(obj.get("candidate_covariance"),
                                 f"{name}.candidate_covariance")
    if "identity" in candidate_cov:
        raise SpecificationError(
            f"{name}.candidate_covariance must not contain 'identity'; "
            "the baseline component is always active")

    power, power_start = _parse_power(obj.get("power", "estimate"), name)
    unknown = set(obj) - {"name", "mean", "covariance", "candidate_mean",
                          "candidate_covariance", "power"}
    if unknown:
        raise SpecificationError(f"unknown keys in response {name!r}: {sorted(unknown)}")
    return ResponseConfig(
        name=name,
        mean=tuple(_string_list(obj.get("mean"), f"{name}.mean")),
        covariance=tuple(covariance),
        candidate_mean=tuple(_string_list(obj.get("candidate_mean"),
                                          f"{name}.candidate_mean")),
        candidate_covariance=tuple(candidate_cov),
        power=power,
        power_start=power_start,
    )


def parse_config(document: dict) -> ModelConfig:
    """Validate a configuration mapping and freeze it into a ModelConfig."""
    document = _expect_mapping(document, "config")
    unknown = set(document) - {"data", "responses", "selection", "fit",
                               "covariance_link", "seed"}
    if unknown:
        raise SpecificationError(f"unknown top-level config keys: {sorted(unknown)}")

    link = document.get("covariance_link", "identity")
    if link != "identity":
        raise SpecificationError(
            f"covariance link {link!r} is not supported; the dispersion "
            "structure is modelled on the identity scale only")

    data = _expect_mapping(document.get("data"), "data")
    group = data.get("group")
    if not isinstance(group, str) or not group:
        raise SpecificationError("data.group (the grouping column) is required")
    responses_doc = document.get("responses")
    if not isinstance(responses_doc, list) or not responses_doc:
        raise SpecificationError("config needs a non-empty 'responses' list")
    used = set()
    responses = tuple(_parse_response(r, used) for r in responses_doc)

    schema = DataSchema(
        group=group,
        responses=tuple(r.name for r in responses),
        time=data.get("time"),
        offset=data.get("offset"),
        categorical=tuple(_string_list(data.get("categorical"), "data.categorical")),
        numeric=tuple(_string_list(data.get("numeric"), "data.numeric")),
    )
    ma_scale = data.get("ma_time_scale", "rank")
    if ma_scale not in ("rank", "calendar"):
        raise SpecificationError("data.ma_time_scale must be 'rank' or 'calendar'")

    selection = _expect_mapping(document.get("selection"), "selection")
    penalty = selection.get("penalty", "aic")
    if penalty not in ("aic", "bic"):
        raise SpecificationError("selection.penalty must be 'aic' or 'bic'")
    threshold = float(selection.get("wald_threshold", 0.05))
    if not 0 < threshold < 1:
        raise SpecificationError("selection.wald_threshold must be in (0, 1)")

    fit = _expect_mapping(document.get("fit"), "fit")
    max_iter = int(fit.get("max_iter", 200))
    tol = float(fit.get("tol", 1e-4))
    step_tol = float(fit.get("step_tol", 1e-6))
    if max_iter < 1 or tol <= 0 or step_tol <= 0:
        raise SpecificationError("fit.max_iter must be >= 1 and tolerances positive")

    seed = document.get("seed")
    return ModelConfig(
        schema=schema, responses=responses, data_path=data.get("path"),
        ma_time_scale=ma_scale, covariance_link=link, penalty=penalty,
        wald_threshold=threshold, max_iter=max_iter, tol=tol, step_tol=step_tol,
        seed=None if seed is None else int(seed),
    )


def load_config(path) -> ModelConfig:
    """Read and validate a YAML configuration file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            document = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise SpecificationError(f"{path}: invalid YAML ({e})") from None
    if document is None:
        raise SpecificationError(f"{path}: empty configuration")
    return parse_config(document)
