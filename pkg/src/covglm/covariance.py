"""Covariance assembly for multivariate count responses.

Each response r gets a covariance built from its mean vector and a linear
combination of known symmetric matrices,

    Sigma_r = diag(mu_r) + V_r^{1/2} Omega_r(tau_r) V_r^{1/2},
    V_r = diag(mu_r ** p_r),  Omega_r = sum_d tau_rd Z_rd,

and the responses are tied together through a cross-response correlation
matrix via a generalized Kronecker product of the lower Cholesky factors,

    C = Bdiag(L_r) (Sigma_b (x) I) Bdiag(L_r)'.

All matrices are block-diagonal over independent groups, so assembly,
inversion, log-determinants and parameter derivatives are carried out one
group at a time; the full stacked matrix only exists in the ``dense``
testing helpers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import InfeasibleParameterError, SpecificationError
from .structures import GroupIndex, KnownMatrix

__all__ = [
    "DispersionState",
    "ParamId",
    "JointCovariance",
    "cross_correlation_matrix",
    "matrix_linear_predictor",
    "response_covariance",
    "cholesky_derivative",
]


@dataclass(frozen=True)
class DispersionState:
    """Dispersion side of the model: correlations, powers, structure coefficients.

    ``rho`` holds the R(R-1)/2 cross-response correlations in row-major
    upper-triangle order, ``power`` one variance power per response, and
    ``tau`` one coefficient vector per response (one entry per known matrix).
    """

    rho: np.ndarray
    power: np.ndarray
    tau: tuple

    def __post_init__(self):
        object.__setattr__(self, "rho", np.atleast_1d(np.asarray(self.rho, dtype=float)))
        object.__setattr__(self, "power", np.atleast_1d(np.asarray(self.power, dtype=float)))
        object.__setattr__(self, "tau", tuple(np.atleast_1d(np.asarray(t, dtype=float))
                                              for t in self.tau))
        r = self.power.shape[0]
        if self.rho.shape[0] != r * (r - 1) // 2:
            raise SpecificationError("rho length must be R(R-1)/2")
        if len(self.tau) != r:
            raise SpecificationError("one tau vector per response required")

    @property
    def n_responses(self) -> int:
        return self.power.shape[0]

    def copy_with(self, **kw) -> "DispersionState":
        return replace(self, **kw)


@dataclass(frozen=True)
class ParamId:
    """Address of one dispersion parameter: kind 'rho' | 'power' | 'tau'.

    For 'rho', ``index`` is the flat upper-triangle position and ``response``
    is unused (-1). For 'power', ``response`` names the response. For 'tau',
    ``response`` and ``index`` locate the coefficient.
    """

    kind: str
    response: int = -1
    index: int = 0


def cross_correlation_matrix(rho: np.ndarray, n_responses: int) -> np.ndarray:
    """Unit-diagonal correlation matrix from the flat upper-triangle vector."""
    s = np.eye(n_responses)
    iu = np.triu_indices(n_responses, k=1)
    s[iu] = rho
    s[(iu[1], iu[0])] = rho
    return s


def matrix_linear_predictor(tau: np.ndarray, blocks: list) -> np.ndarray:
    """Linear combination sum_d tau_d Z_d of one group's structure blocks."""
    out = tau[0] * blocks[0]
    for t, z in zip(tau[1:], blocks[1:]):
        out = out + t * z
    return out


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2.0


def response_covariance(mu: np.ndarray, power: float, omega: np.ndarray) -> np.ndarray:
    """Sigma = diag(mu) + V^{1/2} Omega V^{1/2} for one response on one group."""
    vh = np.power(mu, power / 2.0)
    sig = _symmetrize((vh[:, None] * omega) * vh[None, :])
    sig[np.diag_indices_from(sig)] += mu
    return sig


def cholesky_derivative(chol_lower: np.ndarray, dsigma: np.ndarray) -> np.ndarray:
    """Forward-mode derivative of the lower Cholesky factor.

    Given L with L L' = Sigma and a symmetric perturbation dSigma, returns
    dL = L Phi(L^{-1} dSigma L^{-'}) where Phi keeps the strict lower
    triangle and halves the diagonal.
    """
    f = solve_triangular(chol_lower, dsigma, lower=True)
    f = solve_triangular(chol_lower, f.T, lower=True)
    phi = np.tril(f)
    phi[np.diag_indices_from(phi)] *= 0.5
    return chol_lower @ phi


def _chol_or_infeasible(mat: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise InfeasibleParameterError(f"{what} is not positive definite") from None


class JointCovariance:
    """Joint stacked covariance at one parameter point, stored per group.

    Parameters
    ----------
    groups : GroupIndex
    components : sequence of sequences of KnownMatrix
        One list of structure matrices per response.
    mu : sequence of ndarray
        One mean vector (length n) per response.
    state : DispersionState

    Raises
    ------
    InfeasibleParameterError
        If any per-response block or the cross-correlation matrix fails
        its Cholesky factorization.
    """

    def __init__(self, groups: GroupIndex, components, mu, state: DispersionState):
        self.groups = groups
        self.components = [list(c) for c in components]
        self.mu = [np.asarray(m, dtype=float) for m in mu]
        self.state = state
        self.n_responses = state.n_responses
        if len(self.components) != self.n_responses or len(self.mu) != self.n_responses:
            raise SpecificationError("components and mu must have one entry per response")
        for r, (comp, t) in enumerate(zip(self.components, state.tau)):
            if len(comp) != t.shape[0]:
                raise SpecificationError(
                    f"response {r}: {t.shape[0]} tau values for {len(comp)} structure matrices")

        n, rr = groups.n, self.n_responses
        self.sigma_b = cross_correlation_matrix(state.rho, rr)
        if rr > 1:
            lb = _chol_or_infeasible(self.sigma_b, "cross-response correlation matrix")
            self.sigma_b_inv = np.linalg.inv(self.sigma_b)
            self._logdet_sigma_b = 2.0 * np.sum(np.log(np.diag(lb)))
        else:
            self.sigma_b_inv = np.eye(1)
            self._logdet_sigma_b = 0.0

        self._rows_joint = tuple(
            np.concatenate([r * n + idx for r in range(rr)]) for idx in groups.rows)

        self._vh = []        # per group, per response: diag of V^{1/2}
        self._omega = []     # per group, per response: Omega block
        self._sigma = []     # per group, per response: Sigma block
        self._chol = []      # per group, per response: lower Cholesky of Sigma
        self.cov_blocks = []
        self.inv_blocks = []
        logdet = 0.0
        for g, idx in enumerate(groups.rows):
            vh_g, om_g, sig_g, l_g = [], [], [], []
            for r in range(rr):
                mu_g = self.mu[r][idx]
                if not np.all(np.isfinite(mu_g)) or np.any(mu_g <= 0):
                    raise InfeasibleParameterError(
                        f"response {r}: non-positive mean inside group {groups.labels[g]}")
                om = matrix_linear_predictor(
                    state.tau[r], [z.blocks[g] for z in self.components[r]])
                sig = response_covariance(mu_g, state.power[r], om)
                ell = _chol_or_infeasible(
                    sig, f"response {r} covariance block in group {groups.labels[g]}")
                vh_g.append(np.power(mu_g, state.power[r] / 2.0))
                om_g.append(om)
                sig_g.append(sig)
                l_g.append(ell)
                logdet += 2.0 * np.sum(np.log(np.diag(ell)))
            self._vh.append(vh_g)
            self._omega.append(om_g)
            self._sigma.append(sig_g)
            self._chol.append(l_g)
            logdet += idx.size * self._logdet_sigma_b
            self.cov_blocks.append(self._joint_block(g))
            self.inv_blocks.append(self._joint_inverse_block(g))
        self.logdet = logdet

    # -- assembly ---------------------------------------------------------

    def _joint_block(self, g: int) -> np.ndarray:
        rr = self.n_responses
        if rr == 1:
            # single response: the joint covariance IS the response block
            return self._sigma[g][0]
        o = self.groups.rows[g].size
        c = np.empty((rr * o, rr * o))
        for i in range(rr):
            for j in range(i, rr):
                blk = self.sigma_b[i, j] * (self._chol[g][i] @ self._chol[g][j].T)
                if i == j:
                    blk = _symmetrize(blk)
                c[i * o:(i + 1) * o, j * o:(j + 1) * o] = blk
                if i != j:
                    c[j * o:(j + 1) * o, i * o:(i + 1) * o] = blk.T
        return c

    def _joint_inverse_block(self, g: int) -> np.ndarray:
        rr = self.n_responses
        if rr == 1:
            ell = self._chol[g][0]
            linv = solve_triangular(ell, np.eye(ell.shape[0]), lower=True)
            return _symmetrize(linv.T @ linv)
        o = self.groups.rows[g].size
        linvs = [solve_triangular(self._chol[g][r], np.eye(o), lower=True) for r in range(rr)]
        cinv = np.empty((rr * o, rr * o))
        for i in range(rr):
            for j in range(i, rr):
                blk = self.sigma_b_inv[i, j] * (linvs[i].T @ linvs[j])
                if i == j:
                    blk = _symmetrize(blk)
                cinv[i * o:(i + 1) * o, j * o:(j + 1) * o] = blk
                if i != j:
                    cinv[j * o:(j + 1) * o, i * o:(i + 1) * o] = blk.T
        return cinv

    # -- layout helpers ----------------------------------------------------

    @property
    def n_groups(self) -> int:
        return self.groups.n_groups

    def joint_rows(self, g: int) -> np.ndarray:
        """Indices of group g inside the response-major stacked vector."""
        return self._rows_joint[g]

    # -- derivatives -------------------------------------------------------

    def _dsigma(self, g: int, pid: ParamId) -> np.ndarray:
        """Derivative of one response block Sigma_r with respect to tau or power."""
        idx = self.groups.rows[g]
        r = pid.response
        vh = self._vh[g][r]
        if pid.kind == "tau":
            z = self.components[r][pid.index].blocks[g]
            return _symmetrize((vh[:, None] * z) * vh[None, :])
        if pid.kind == "power":
            mu_g = self.mu[r][idx]
            a = 0.5 * vh * np.log(mu_g)
            half = (a[:, None] * self._omega[g][r]) * vh[None, :]
            return half + half.T
        raise SpecificationError(f"not a response-block parameter: {pid.kind}")

    def derivative_block(self, g: int, pid: ParamId) -> np.ndarray:
        """Derivative of the joint covariance block of group g for one parameter."""
        rr = self.n_responses
        if rr == 1:
            return self._dsigma(g, pid)
        o = self.groups.rows[g].size
        dc = np.zeros((rr * o, rr * o))
        if pid.kind == "rho":
            iu = np.triu_indices(rr, k=1)
            i, j = int(iu[0][pid.index]), int(iu[1][pid.index])
            blk = self._chol[g][i] @ self._chol[g][j].T
            dc[i * o:(i + 1) * o, j * o:(j + 1) * o] = blk
            dc[j * o:(j + 1) * o, i * o:(i + 1) * o] = blk.T
            return dc
        r = pid.response
        dl = cholesky_derivative(self._chol[g][r], self._dsigma(g, pid))
        for j in range(rr):
            if j == r:
                blk = _symmetrize(dl @ self._chol[g][r].T + self._chol[g][r] @ dl.T)
                dc[r * o:(r + 1) * o, r * o:(r + 1) * o] = blk
            else:
                blk = self.sigma_b[r, j] * (dl @ self._chol[g][j].T)
                dc[r * o:(r + 1) * o, j * o:(j + 1) * o] = blk
                dc[j * o:(j + 1) * o, r * o:(r + 1) * o] = blk.T
        return dc

    def derivative_blocks(self, g: int, params) -> list:
        return [self.derivative_block(g, pid) for pid in params]

    # -- dense testing helpers ----------------------------------------------

    def dense(self) -> np.ndarray:
        n, rr = self.groups.n, self.n_responses
        out = np.zeros((n * rr, n * rr))
        for g in range(self.n_groups):
            jr = self._rows_joint[g]
            out[np.ix_(jr, jr)] = self.cov_blocks[g]
        return out

    def dense_derivative(self, pid: ParamId) -> np.ndarray:
        n, rr = self.groups.n, self.n_responses
        out = np.zeros((n * rr, n * rr))
        for g in range(self.n_groups):
            jr = self._rows_joint[g]
            out[np.ix_(jr, jr)] = self.derivative_block(g, pid)
        return out

    # -- whole-matrix operations used by estimation --------------------------

    def solve_stacked(self, vec: np.ndarray) -> np.ndarray:
        """C^{-1} v for a response-major stacked vector."""
        out = np.empty_like(vec)
        for g in range(self.n_groups):
            jr = self._rows_joint[g]
            out[jr] = self.inv_blocks[g] @ vec[jr]
        return out

    def quadratic_form(self, vec: np.ndarray) -> float:
        """v' C^{-1} v."""
        total = 0.0
        for g in range(self.n_groups):
            jr = self._rows_joint[g]
            v = vec[jr]
            total += float(v @ (self.inv_blocks[g] @ v))
        return total
