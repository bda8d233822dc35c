"""Shared brute-force oracles and simulation shortcuts for the test suite.

Everything here recomputes model quantities from dense stacked matrices,
independently of the per-group engine under test.
"""

import numpy as np

from covglm.covariance import DispersionState
from covglm.estimation import assemble_covariance, linear_predictors, stacked_residual
from covglm.simulate import sample_gaussian, toy_model


def dense_jacobian(mm, mus):
    n, k_tot = mm.n, mm.n_coef
    d = np.zeros((mm.n_responses * n, k_tot))
    for r, sl in enumerate(mm.beta_slices()):
        d[r * n:(r + 1) * n, sl] = mus[r][:, None] * mm.design[r]
    return d


def dense_systems(mm, beta, state, params):
    """Brute-force dense evaluation of all estimating-function blocks."""
    cov = assemble_covariance(mm, beta, state)
    _, mus = linear_predictors(mm, beta)
    resid = stacked_residual(mm, mus)
    c = cov.dense()
    cinv = np.linalg.inv(c)
    d = dense_jacobian(mm, mus)
    psi_b = d.T @ cinv @ resid
    sens_b = -d.T @ cinv @ d

    ws = [cinv @ cov.dense_derivative(p) @ cinv for p in params]
    outer = np.outer(resid, resid)
    psi_l = np.array([np.sum(w * (outer - c)) for w in ws])
    q = len(params)
    sens_l = np.zeros((q, q))
    var_l = np.zeros((q, q))
    k4 = resid ** 4 - 3.0 * np.diag(c) ** 2
    for i in range(q):
        for j in range(q):
            sens_l[i, j] = -np.trace(ws[i] @ c @ ws[j] @ c)
            var_l[i, j] = (2.0 * np.trace(ws[i] @ c @ ws[j] @ c)
                           + np.sum(k4 * np.diag(ws[i]) * np.diag(ws[j])))
    return psi_b, sens_b, psi_l, sens_l, var_l


def simulated_toy(seed=0, beta_vals=(0.8, 0.4), tau_vals=(0.5, 0.25),
                  rho=-0.2, **kw):
    """toy_model with Gaussian responses drawn from known true parameters."""
    mm = toy_model(seed=seed, **kw)
    rng = np.random.default_rng(seed + 1000)
    rr = mm.n_responses
    beta_true = np.concatenate([list(beta_vals)] * rr)
    tau = tuple(np.array(list(tau_vals)[: len(c)]) for c in mm.components)
    state_true = DispersionState(rho=np.full(rr * (rr - 1) // 2, rho),
                                 power=[mm.power_start[r] for r in range(rr)],
                                 tau=tau)
    mm.y = sample_gaussian(mm, beta_true, state_true, rng)
    return mm, beta_true, state_true
