"""Seeded self-test suite: derivative oracles and closed-form invariants.

The `check` command runs this against randomized small models. Every
analytic derivative the estimation machinery relies on is compared with a
central finite difference of the dense covariance assembly, and the exact
special cases of the dispersion function are verified.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .covariance import (DispersionState, JointCovariance, ParamId,
                         cholesky_derivative)
from .exceptions import InfeasibleParameterError
from .structures import (GroupIndex, build_covariate_block, build_exchangeable,
                         build_identity, build_inverse_distance, build_ma_band)

__all__ = ["CheckResult", "run_checks", "all_passed"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    tol: float
    passed: bool
    detail: str = ""

    def __post_init__(self):
        object.__setattr__(self, "worst", float(self.worst))
        object.__setattr__(self, "tol", float(self.tol))
        object.__setattr__(self, "passed", bool(self.passed))

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.name:<42s} worst {self.worst:.3e} (tol {self.tol:.0e})"


def _all_params(state: DispersionState):
    out = [ParamId("rho", index=k) for k in range(len(state.rho))]
    out += [ParamId("power", response=r) for r in range(state.n_responses)]
    for r, t in enumerate(state.tau):
        out += [ParamId("tau", response=r, index=d) for d in range(len(t))]
    return out


def _perturb(state: DispersionState, pid: ParamId, h: float) -> DispersionState:
    rho = np.asarray(state.rho, dtype=float).copy()
    power = np.asarray(state.power, dtype=float).copy()
    tau = [np.asarray(t, dtype=float).copy() for t in state.tau]
    if pid.kind == "rho":
        rho[pid.index] += h
    elif pid.kind == "power":
        power[pid.response] += h
    else:
        tau[pid.response][pid.index] += h
    return DispersionState(rho=rho, power=power, tau=tuple(tau))


def _random_model(rng: np.random.Generator):
    """One feasible random configuration: N <= 60, R in {1, 2}."""
    n_groups = int(rng.integers(2, 7))
    size = int(rng.integers(2, 6))
    gi = GroupIndex.from_labels(
        group=np.repeat(np.arange(n_groups), size),
        time=np.tile(np.arange(size, dtype=float), n_groups))
    rr = int(rng.integers(1, 3))
    pool = ["exchangeable", "ma", "inverse_distance", "covariate"]
    comps, taus, mus = [], [], []
    for r in range(rr):
        extra = rng.choice(pool, size=int(rng.integers(1, 4)), replace=False)
        cc = [build_identity(gi)]
        tt = [rng.uniform(0.4, 0.9)]
        for kind in extra:
            if kind == "exchangeable":
                cc.append(build_exchangeable(gi))
            elif kind == "ma" and size >= 2:
                cc.append(build_ma_band(gi, lag=1))
            elif kind == "inverse_distance":
                cc.append(build_inverse_distance(gi))
            else:
                cc.append(build_covariate_block(gi, rng.normal(scale=0.5, size=gi.n),
                                                label="covariate"))
            tt.append(rng.uniform(-0.04, 0.12))
        comps.append(cc)
        taus.append(np.array(tt))
        mus.append(np.exp(rng.normal(loc=0.8, scale=0.5, size=gi.n)))
    state = DispersionState(
        rho=rng.uniform(-0.35, 0.35, size=rr * (rr - 1) // 2),
        power=rng.uniform(1.0, 3.0, size=rr),
        tau=tuple(taus))
    return gi, comps, mus, state


def _feasible_random_model(rng: np.random.Generator):
    for _ in range(64):
        gi, comps, mus, state = _random_model(rng)
        try:
            JointCovariance(gi, comps, mus, state)
        except InfeasibleParameterError:
            continue
        return gi, comps, mus, state
    raise RuntimeError("could not draw a feasible random configuration")


def _derivative_check(rng: np.random.Generator, index: int, tol: float) -> CheckResult:
    gi, comps, mus, state = _feasible_random_model(rng)
    cov = JointCovariance(gi, comps, mus, state)
    h = 1e-6
    worst, worst_pid = 0.0, None
    for pid in _all_params(state):
        up = JointCovariance(gi, comps, mus, _perturb(state, pid, h)).dense()
        dn = JointCovariance(gi, comps, mus, _perturb(state, pid, -h)).dense()
        fd = (up - dn) / (2.0 * h)
        analytic = cov.dense_derivative(pid)
        rel = np.max(np.abs(analytic - fd)) / max(np.max(np.abs(analytic)), 1.0)
        if rel > worst:
            worst, worst_pid = rel, pid
    detail = "" if worst_pid is None else f"worst parameter {worst_pid}"
    return CheckResult(f"covariance derivatives, configuration {index}",
                       worst, tol, worst <= tol, detail)


def _cholesky_derivative_check(rng: np.random.Generator, tol: float) -> CheckResult:
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(2, 7))
        a = rng.normal(size=(n, n))
        sigma = a @ a.T + n * np.eye(n)
        d = rng.normal(size=(n, n))
        dsigma = d + d.T
        chol = np.linalg.cholesky(sigma)
        analytic = cholesky_derivative(chol, dsigma)
        h = 1e-6
        fd = (np.linalg.cholesky(sigma + h * dsigma)
              - np.linalg.cholesky(sigma - h * dsigma)) / (2.0 * h)
        rel = np.max(np.abs(analytic - fd)) / max(np.max(np.abs(analytic)), 1.0)
        worst = max(worst, rel)
    return CheckResult("cholesky directional derivative", worst, tol, worst <= tol)


def _closed_form_checks() -> list:
    """Exact special cases of diag(mu) + V^1/2 Omega V^1/2.

    Values are chosen so every float product is exact: tau_0 a power of
    two and means whose square roots are integers.
    """
    out = []
    gi = GroupIndex.from_labels(group=np.zeros(4), time=np.arange(4.0))
    comps = [[build_identity(gi)]]
    tau0 = 0.5

    mu = np.array([1.0, 4.0, 16.0, 64.0])
    cov = JointCovariance(gi, comps, [mu], DispersionState(
        rho=np.zeros(0), power=[2.0], tau=(np.array([tau0]),)))
    got = np.diag(cov.cov_blocks[0])
    want = mu + (tau0 * mu) * mu
    exact2 = bool(np.array_equal(got, want))
    out.append(CheckResult("negative-binomial diagonal mu + tau0*mu^2",
                           float(np.max(np.abs(got - want))), 0.0, exact2))

    cov = JointCovariance(gi, comps, [mu], DispersionState(
        rho=np.zeros(0), power=[1.0], tau=(np.array([tau0]),)))
    got = np.diag(cov.cov_blocks[0])
    want = (1.0 + tau0) * mu
    exact1 = bool(np.array_equal(got, want))
    out.append(CheckResult("overdispersed-count diagonal (1 + tau0)*mu",
                           float(np.max(np.abs(got - want))), 0.0, exact1))

    rng = np.random.default_rng(7)
    mus = [np.exp(rng.normal(size=4)) for _ in range(2)]
    cov = JointCovariance(gi, [comps[0], comps[0]], mus, DispersionState(
        rho=np.zeros(1), power=[1.5, 2.5],
        tau=(np.array([0.6]), np.array([0.4]))))
    block = cov.cov_blocks[0]
    off = np.max(np.abs(block[:4, 4:]))
    scale = np.max(np.abs(np.diag(block)))
    out.append(CheckResult("zero cross-correlation gives block-diagonal joint",
                           off / scale, 1e-12, off / scale <= 1e-12))
    return out


def run_checks(seed: int = 0, n_configs: int = 25, tol: float = 1e-6) -> list:
    """Run the full suite; returns one CheckResult per check."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    results = [_derivative_check(rng, i + 1, tol) for i in range(n_configs)]
    results.append(_cholesky_derivative_check(rng, tol))
    results.extend(_closed_form_checks())
    elapsed = time.perf_counter() - t0
    results.append(CheckResult("suite wall time (seconds)", elapsed, 60.0,
                               elapsed < 60.0))
    return results


def all_passed(results) -> bool:
    return all(r.passed for r in results)
