"""Estimating-function fitting for multivariate count models.

Regression coefficients solve the quasi-score equation

    psi_beta = D' C^{-1} (y - mu) = 0,  D = Bdiag(diag(mu_r) X_r),

and dispersion parameters solve the Pearson estimating equation

    psi_i = r' W_i r - tr(W_i C),  W_i = C^{-1} (dC/dlambda_i) C^{-1},

by alternating Newton scoring steps: a full regression update followed by
a damped dispersion update with step-halving on infeasible points or on
an increase of the dispersion score norm. Standard errors come from the
Godambe (sandwich) information with an empirical fourth-moment correction
in the dispersion variability block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import DispersionState, JointCovariance, ParamId
from .exceptions import ConvergenceError, InfeasibleParameterError, SpecificationError
from .structures import GroupIndex

__all__ = [
    "ModelMatrices",
    "LambdaLayout",
    "FittedModel",
    "fit",
    "fit_invocations",
    "quasi_poisson_start",
    "quasi_score",
    "pearson_system",
    "gaussian_pseudo_loglik",
    "sandwich_vcov",
]

_FIT_INVOCATIONS = 0


def fit_invocations() -> int:
    """Number of times fit() has been entered in this process (test hook)."""
    return _FIT_INVOCATIONS


@dataclass
class ModelMatrices:
    """Fit-ready model: responses, designs, offsets and covariance structures.

    ``offset`` is additive on the log scale (zero vector when absent) and
    ``power_fixed[r]`` is None when the variance power of response r is
    estimated, otherwise the value it is pinned to.
    """

    groups: GroupIndex
    response_names: list
    y: list
    design: list
    coef_names: list
    offset: list
    components: list
    power_fixed: list
    power_start: list = None

    def __post_init__(self):
        rr = len(self.response_names)
        for name, seq in (("y", self.y), ("design", self.design), ("offset", self.offset),
                          ("coef_names", self.coef_names), ("components", self.components),
                          ("power_fixed", self.power_fixed)):
            if len(seq) != rr:
                raise SpecificationError(f"{name} must have one entry per response")
        self.y = [np.asarray(v, dtype=float) for v in self.y]
        self.design = [np.asarray(x, dtype=float) for x in self.design]
        self.offset = [np.asarray(o, dtype=float) for o in self.offset]
        n = self.groups.n
        for r in range(rr):
            if self.y[r].shape != (n,) or self.offset[r].shape != (n,):
                raise SpecificationError(f"response {r}: y and offset must have length {n}")
            if self.design[r].shape[0] != n:
                raise SpecificationError(f"response {r}: design must have {n} rows")
            if len(self.coef_names[r]) != self.design[r].shape[1]:
                raise SpecificationError(f"response {r}: one name per design column required")
            if len(self.components[r]) == 0:
                raise SpecificationError(
                    f"response {r}: at least one covariance structure matrix is required")
        if self.power_start is None:
            self.power_start = [1.5 if pf is None else float(pf) for pf in self.power_fixed]

    @property
    def n(self) -> int:
        return self.groups.n

    @property
    def n_responses(self) -> int:
        return len(self.response_names)

    @property
    def n_coef(self) -> int:
        return sum(x.shape[1] for x in self.design)

    def beta_slices(self) -> list:
        slices, pos = [], 0
        for x in self.design:
            slices.append(slice(pos, pos + x.shape[1]))
            pos += x.shape[1]
        return slices

    def coef_labels(self) -> list:
        out = []
        for name, cn in zip(self.response_names, self.coef_names):
            out.extend(f"{name}:{c}" for c in cn)
        return out


class LambdaLayout:
    """Order of the free dispersion parameters: rho's, powers, then tau's."""

    def __init__(self, mm: ModelMatrices):
        rr = mm.n_responses
        self.params = []
        self.labels = []
        iu = np.triu_indices(rr, k=1)
        for k in range(iu[0].size):
            self.params.append(ParamId("rho", index=k))
            self.labels.append(
                f"rho({mm.response_names[iu[0][k]]},{mm.response_names[iu[1][k]]})")
        for r in range(rr):
            if mm.power_fixed[r] is None:
                self.params.append(ParamId("power", response=r))
                self.labels.append(f"power({mm.response_names[r]})")
        for r in range(rr):
            for d, z in enumerate(mm.components[r]):
                self.params.append(ParamId("tau", response=r, index=d))
                self.labels.append(f"tau({mm.response_names[r]},{z.label})")
        self._pos = {(p.kind, p.response, p.index): i for i, p in enumerate(self.params)}

    def __len__(self) -> int:
        return len(self.params)

    def index_of(self, kind: str, response: int = -1, index: int = 0) -> int:
        return self._pos[(kind, response, index)]

    def vector(self, state: DispersionState) -> np.ndarray:
        lam = np.empty(len(self.params))
        for i, p in enumerate(self.params):
            if p.kind == "rho":
                lam[i] = state.rho[p.index]
            elif p.kind == "power":
                lam[i] = state.power[p.response]
            else:
                lam[i] = state.tau[p.response][p.index]
        return lam

    def apply(self, state: DispersionState, lam: np.ndarray) -> DispersionState:
        rho = state.rho.copy()
        power = state.power.copy()
        tau = [t.copy() for t in state.tau]
        for i, p in enumerate(self.params):
            if p.kind == "rho":
                rho[p.index] = lam[i]
            elif p.kind == "power":
                power[p.response] = lam[i]
            else:
                tau[p.response][p.index] = lam[i]
        return DispersionState(rho=rho, power=power, tau=tuple(tau))


# -- design rank check -------------------------------------------------------

def check_design_rank(mm: ModelMatrices) -> None:
    """Raise SpecificationError naming aliased columns of any rank-deficient design."""
    from scipy.linalg import qr

    for r in range(mm.n_responses):
        x = mm.design[r]
        if x.shape[1] == 0:
            raise SpecificationError(f"response {mm.response_names[r]}: empty design")
        _, rmat, piv = qr(x, mode="economic", pivoting=True)
        diag = np.abs(np.diag(rmat))
        tol = diag[0] * max(x.shape) * np.finfo(float).eps if diag.size else 0.0
        rank = int(np.sum(diag > tol))
        if rank < x.shape[1]:
            aliased = [mm.coef_names[r][j] for j in piv[rank:]]
            raise SpecificationError(
                f"response {mm.response_names[r]}: design is rank deficient; "
                f"aliased columns: {', '.join(aliased)}")


# -- means, residuals, assembly ----------------------------------------------

def linear_predictors(mm: ModelMatrices, beta: np.ndarray):
    etas, mus = [], []
    for x, off, sl in zip(mm.design, mm.offset, mm.beta_slices()):
        eta = x @ beta[sl] + off
        etas.append(eta)
        mus.append(np.exp(eta))
    return etas, mus


def stacked_residual(mm: ModelMatrices, mus) -> np.ndarray:
    return np.concatenate([y - mu for y, mu in zip(mm.y, mus)])


def assemble_covariance(mm: ModelMatrices, beta: np.ndarray,
                        state: DispersionState) -> JointCovariance:
    _, mus = linear_predictors(mm, beta)
    return JointCovariance(mm.groups, mm.components, mus, state)


# -- estimating functions ------------------------------------------------------

def _group_jacobian(mm: ModelMatrices, mus, g: int) -> np.ndarray:
    """Mean Jacobian D on one group, rows response-major, columns all coefficients."""
    idx = mm.groups.rows[g]
    k_tot = mm.n_coef
    rr = mm.n_responses
    d = np.zeros((rr * idx.size, k_tot))
    for r, sl in enumerate(mm.beta_slices()):
        d[r * idx.size:(r + 1) * idx.size, sl] = mus[r][idx, None] * mm.design[r][idx]
    return d


def quasi_score(mm: ModelMatrices, mus, resid: np.ndarray, cov: JointCovariance):
    """Quasi-score psi_beta and its sensitivity -D' C^{-1} D."""
    k_tot = mm.n_coef
    psi = np.zeros(k_tot)
    sens = np.zeros((k_tot, k_tot))
    for g in range(cov.n_groups):
        jr = cov.joint_rows(g)
        d = _group_jacobian(mm, mus, g)
        cid = cov.inv_blocks[g] @ d
        psi += cid.T @ resid[jr]
        sens -= d.T @ cid
    return psi, sens


def pearson_system(mm: ModelMatrices, resid: np.ndarray, cov: JointCovariance,
                   params, want_variability: bool = False):
    """Pearson score, sensitivity and (optionally) variability for given parameters.

    Returns (psi, sens) or (psi, sens, var). The variability uses the
    second-moment expression plus an empirical fourth-cumulant correction
    on the diagonal, k4_l = r_l**4 - 3 C_ll**2.
    """
    q = len(params)
    psi = np.zeros(q)
    sens = np.zeros((q, q))
    var = np.zeros((q, q)) if want_variability else None
    for g in range(cov.n_groups):
        jr = cov.joint_rows(g)
        r_g = resid[jr]
        cinv = cov.inv_blocks[g]
        u = cinv @ r_g
        dc = np.stack(cov.derivative_blocks(g, params))
        m = cinv @ dc  # stacked C^{-1} dC_i
        psi += np.einsum("iab,a,b->i", dc, u, u) - np.einsum("iaa->i", m)
        tr_mm = np.einsum("iab,jba->ij", m, m)
        sens -= tr_mm
        if want_variability:
            dw = np.einsum("iab,ab->ia", m, cinv)  # diag of W_i = C^{-1} dC_i C^{-1}
            k4 = r_g ** 4 - 3.0 * np.diag(cov.cov_blocks[g]) ** 2
            var += 2.0 * tr_mm + np.einsum("ia,a,ja->ij", dw, k4, dw)
    if want_variability:
        return psi, sens, var
    return psi, sens


def gaussian_pseudo_loglik(cov: JointCovariance, resid: np.ndarray) -> float:
    """Gaussian pseudo log-likelihood -0.5 (NR log 2pi + logdet C + r' C^{-1} r)."""
    nr = resid.shape[0]
    return -0.5 * (nr * np.log(2.0 * np.pi) + cov.logdet + cov.quadratic_form(resid))


# -- initialization -------------------------------------------------------------

def quasi_poisson_start(y: np.ndarray, x: np.ndarray, offset: np.ndarray,
                        max_iter: int = 25, tol: float = 1e-10) -> np.ndarray:
    """Log-link IRLS start values for one response's regression coefficients."""
    # responses can be any reals with positive mean; floor the start at 0.5
    eta = np.log(np.maximum(np.asarray(y, dtype=float), 0.0) + 0.5)
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        eta = np.clip(eta, -30.0, 30.0)
        mu = np.exp(eta)
        z = eta - offset + (y - mu) / mu
        wx = x * mu[:, None]
        try:
            beta_new = np.linalg.solve(x.T @ wx, wx.T @ z)
        except np.linalg.LinAlgError:
            beta_new, *_ = np.linalg.lstsq(x.T @ wx, wx.T @ z, rcond=None)
        done = np.max(np.abs(beta_new - beta)) < tol
        beta = beta_new
        eta = x @ beta + offset
        if done:
            break
    return beta


def initial_point(mm: ModelMatrices):
    """Starting values: IRLS regression, tau = (0.1, 0, ...), power start, rho = 0."""
    beta = np.concatenate([
        quasi_poisson_start(mm.y[r], mm.design[r], mm.offset[r])
        for r in range(mm.n_responses)])
    rr = mm.n_responses
    tau = []
    for comps in mm.components:
        t = np.zeros(len(comps))
        t[0] = 0.1
        tau.append(t)
    state = DispersionState(rho=np.zeros(rr * (rr - 1) // 2),
                            power=np.array(mm.power_start, dtype=float),
                            tau=tuple(tau))
    return beta, state


# -- fitted model ----------------------------------------------------------------

@dataclass
class FittedModel:
    """Converged fit with scores, sandwich covariance and diagnostics."""

    model: ModelMatrices
    layout: LambdaLayout
    beta: np.ndarray
    state: DispersionState
    lam: np.ndarray
    mu: list
    residual: np.ndarray
    converged: bool
    n_iter: int
    score_beta: np.ndarray
    score_lambda: np.ndarray
    sens_beta: np.ndarray
    sens_lambda: np.ndarray
    var_lambda: np.ndarray
    vcov: np.ndarray
    gpl: float
    trace: list = field(default_factory=list)

    @property
    def n_coef(self) -> int:
        return self.beta.shape[0]

    @property
    def max_abs_score(self) -> float:
        return max(np.max(np.abs(self.score_beta)), np.max(np.abs(self.score_lambda)))

    def beta_for(self, r: int) -> np.ndarray:
        return self.beta[self.model.beta_slices()[r]]

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))

    def se_beta(self) -> np.ndarray:
        return self.se()[: self.n_coef]

    def se_lambda(self) -> np.ndarray:
        return self.se()[self.n_coef:]

    def vcov_beta(self) -> np.ndarray:
        return self.vcov[: self.n_coef, : self.n_coef]

    def lambda_index(self, kind: str, response: int = -1, index: int = 0) -> int:
        return self.layout.index_of(kind, response, index)

    def parameter_labels(self) -> list:
        return self.model.coef_labels() + list(self.layout.labels)

    def covariance_at_fit(self) -> JointCovariance:
        return assemble_covariance(self.model, self.beta, self.state)


# -- sandwich ---------------------------------------------------------------------

def sandwich_vcov(mm: ModelMatrices, layout: LambdaLayout, beta: np.ndarray,
                  state: DispersionState, sens_beta: np.ndarray,
                  sens_lambda: np.ndarray, var_lambda: np.ndarray) -> np.ndarray:
    """Godambe information inverse for (beta, lambda).

    The joint sensitivity is block lower-triangular (the mean score has
    zero expected lambda-gradient); the cross block d psi_lambda / d beta
    is filled in by central finite differences because mu enters both the
    residual and the covariance weights.
    """
    k_tot, q = mm.n_coef, len(layout)
    sens = np.zeros((k_tot + q, k_tot + q))
    sens[:k_tot, :k_tot] = sens_beta
    sens[k_tot:, k_tot:] = sens_lambda
    for k in range(k_tot):
        h = 1e-6 * (1.0 + abs(beta[k]))
        cols = []
        for sign in (1.0, -1.0):
            b = beta.copy()
            b[k] += sign * h
            _, mus_k = linear_predictors(mm, b)
            cov_k = JointCovariance(mm.groups, mm.components, mus_k, state)
            resid_k = stacked_residual(mm, mus_k)
            psi_k, _ = pearson_system(mm, resid_k, cov_k, layout.params)
            cols.append(psi_k)
        sens[k_tot:, k] = (cols[0] - cols[1]) / (2.0 * h)

    var = np.zeros_like(sens)
    var[:k_tot, :k_tot] = -sens_beta  # model-based: D' C^{-1} D
    var[k_tot:, k_tot:] = var_lambda
    sinv = np.linalg.inv(sens)
    return sinv @ var @ sinv.T


# -- main loop -----------------------------------------------------------------------

def _feasible_beta_step(mm, beta, delta, state):
    """Full Newton mean update, halved only if it leaves the feasible region."""
    alpha = 1.0
    for _ in range(11):
        cand = beta + alpha * delta
        try:
            cov = assemble_covariance(mm, cand, state)
            return cand, cov
        except InfeasibleParameterError:
            alpha *= 0.5
    raise ConvergenceError("mean update failed to reach a feasible point")


def _scoring_loop(mm: ModelMatrices, layout: LambdaLayout, beta: np.ndarray,
                  state: DispersionState, max_iter: int, score_tol: float,
                  step_tol: float, trace: list, stage: str):
    """Alternating Newton iterations over one parameter layout.

    Appends one row per iteration to ``trace`` and returns
    (beta, state, converged, iterations_used).
    """
    lam = layout.vector(state)
    try:
        cov = assemble_covariance(mm, beta, state)
    except InfeasibleParameterError as e:
        raise ConvergenceError(f"infeasible starting point: {e}") from e

    converged = False
    n_iter = 0
    power_idx = [i for i, p in enumerate(layout.params) if p.kind == "power"]
    for it in range(1, max_iter + 1):
        n_iter = it
        # mean update at the current dispersion point
        _, mus = linear_predictors(mm, beta)
        resid = stacked_residual(mm, mus)
        psi_b, sens_b = quasi_score(mm, mus, resid, cov)
        delta_b = np.linalg.solve(-sens_b, psi_b)
        beta_new, cov = _feasible_beta_step(mm, beta, delta_b, state)
        beta_change = np.max(np.abs(beta_new - beta))
        beta = beta_new
        _, mus = linear_predictors(mm, beta)
        resid = stacked_residual(mm, mus)

        # damped dispersion update at the new mean
        psi_l, sens_l = pearson_system(mm, resid, cov, layout.params)
        base_norm = np.max(np.abs(psi_l))
        try:
            delta_l = np.linalg.solve(sens_l, psi_l)
        except np.linalg.LinAlgError:
            delta_l, *_ = np.linalg.lstsq(sens_l, psi_l, rcond=None)
        accepted = None
        last_feasible = None
        alpha = 1.0
        for _ in range(11):
            lam_cand = lam - alpha * delta_l
            if power_idx:
                # keep power iterates away from the degenerate region where
                # mu**(p/2) under- or overflows and every dispersion score
                # vanishes identically (a spurious root)
                lam_cand[power_idx] = np.clip(lam_cand[power_idx], 0.1, 10.0)
            try:
                state_cand = layout.apply(state, lam_cand)
                cov_cand = assemble_covariance(mm, beta, state_cand)
            except InfeasibleParameterError:
                alpha *= 0.5
                continue
            psi_cand, _ = pearson_system(mm, resid, cov_cand, layout.params)
            cand = (lam_cand, state_cand, cov_cand, psi_cand)
            last_feasible = cand
            if np.max(np.abs(psi_cand)) <= base_norm or base_norm <= score_tol:
                accepted = cand
                break
            alpha *= 0.5
        if accepted is None:
            if last_feasible is None:
                raise ConvergenceError("dispersion update found no feasible point", trace)
            accepted = last_feasible
        lam_new, state, cov, psi_l_new = accepted
        lam_change = np.max(np.abs(lam_new - lam))
        lam = lam_new

        # scores at the fully updated point (psi_l_new already sits there)
        psi_b2, _ = quasi_score(mm, mus, resid, cov)
        sup_b = np.max(np.abs(psi_b2))
        sup_l = np.max(np.abs(psi_l_new))
        change = max(beta_change, lam_change)
        trace.append({"stage": stage, "iteration": it, "score_beta": float(sup_b),
                      "score_lambda": float(sup_l), "change": float(change)})
        if sup_b <= score_tol and sup_l <= score_tol and change <= step_tol:
            converged = True
            break
    return beta, state, converged, n_iter


def _fixed_power_copy(mm: ModelMatrices) -> ModelMatrices:
    """The same model with every estimated power pinned at its start value."""
    return ModelMatrices(
        groups=mm.groups, response_names=mm.response_names, y=mm.y,
        design=mm.design, coef_names=mm.coef_names, offset=mm.offset,
        components=mm.components, power_fixed=[float(p) for p in mm.power_start],
        power_start=[float(p) for p in mm.power_start])


def fit(mm: ModelMatrices, start=None, max_iter: int = 200, score_tol: float = 1e-4,
        step_tol: float = 1e-6, compute_vcov: bool = True) -> FittedModel:
    """Fit the model by alternating Newton scoring.

    Convergence requires both estimating-equation sup-norms at or below
    ``score_tol`` and the latest parameter change at or below ``step_tol``.
    The dispersion update is damped: the step is halved (up to 10 times)
    whenever it lands on a non-positive-definite point or increases the
    Pearson score sup-norm; after 10 halvings the smallest feasible step
    is accepted. Estimated power iterates are confined to [0.1, 10]; outside
    that box mu**(p/2) under- or overflows, the dispersion scores vanish
    identically, and the iteration would stall on a spurious root.

    When any power is estimated and no explicit ``start`` is given, the
    solver first converges the fixed-power model and releases the powers
    from that point; joint updates from a cold start can drift into the
    degenerate power region before the other parameters settle.

    Parameters
    ----------
    mm : ModelMatrices
    start : optional (beta, DispersionState) pair overriding the default
        initialization (IRLS regression start, tau = (0.1, 0, ...), power
        at its start value, rho = 0).
    """
    global _FIT_INVOCATIONS
    _FIT_INVOCATIONS += 1

    check_design_rank(mm)
    layout = LambdaLayout(mm)
    q = len(layout)
    trace = []
    warm_iters = 0
    if start is None:
        beta, state = initial_point(mm)
        if any(pf is None for pf in mm.power_fixed):
            mm_fixed = _fixed_power_copy(mm)
            try:
                beta_w, state_w, _, warm_iters = _scoring_loop(
                    mm_fixed, LambdaLayout(mm_fixed), beta, state,
                    max_iter, score_tol, step_tol, trace, "warm")
                beta, state = beta_w, state_w
            except ConvergenceError:
                beta, state = initial_point(mm)
    else:
        beta, state = start[0].copy(), start[1]

    beta, state, converged, main_iters = _scoring_loop(
        mm, layout, beta, state, max_iter, score_tol, step_tol, trace, "main")
    n_iter = warm_iters + main_iters
    lam = layout.vector(state)

    if not converged:
        raise ConvergenceError(
            f"no convergence in {n_iter} iterations "
            f"(score sup-norms {trace[-1]['score_beta']:.3g}/{trace[-1]['score_lambda']:.3g})",
            trace)

    # final re-evaluation from scratch at the solution
    state = layout.apply(state, lam)
    cov = assemble_covariance(mm, beta, state)
    _, mus = linear_predictors(mm, beta)
    resid = stacked_residual(mm, mus)
    psi_b, sens_b = quasi_score(mm, mus, resid, cov)
    psi_l, sens_l, var_l = pearson_system(mm, resid, cov, layout.params,
                                          want_variability=True)

    k_tot = mm.n_coef
    if compute_vcov:
        vcov = sandwich_vcov(mm, layout, beta, state, sens_b, sens_l, var_l)
    else:
        vcov = np.full((k_tot + q, k_tot + q), np.nan)

    return FittedModel(
        model=mm, layout=layout, beta=beta, state=state, lam=lam, mu=mus,
        residual=resid, converged=converged, n_iter=n_iter,
        score_beta=psi_b, score_lambda=psi_l, sens_beta=sens_b,
        sens_lambda=sens_l, var_lambda=var_l, vcov=vcov,
        gpl=gaussian_pseudo_loglik(cov, resid), trace=trace)
