"""Covariance engine against an independent dense-matrix oracle.

The oracle builds the stacked covariance literally: full per-response
covariance matrices, their (scattered block) Cholesky factors via
numpy.linalg.cholesky on the dense matrix, and the generalized Kronecker
product through an explicit np.kron. Derivatives are checked against
central finite differences of the dense assembly.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.linalg import block_diag

from covglm.covariance import (
    DispersionState,
    JointCovariance,
    ParamId,
    cholesky_derivative,
    cross_correlation_matrix,
    matrix_linear_predictor,
    response_covariance,
)
from covglm.exceptions import InfeasibleParameterError, SpecificationError
from covglm.structures import (
    GroupIndex,
    build_covariate_block,
    build_exchangeable,
    build_identity,
    build_ma_band,
    dense_from_blocks,
)


def make_case(seed, n_responses=2, n_groups=4, group_size=5, rho_scale=0.4):
    rng = np.random.default_rng(seed)
    n = n_groups * group_size
    gi = GroupIndex.from_labels(group=np.repeat(np.arange(n_groups), group_size),
                                time=np.tile(np.arange(group_size, dtype=float), n_groups))
    comps, taus, mus = [], [], []
    for _ in range(n_responses):
        comps.append([
            build_identity(gi),
            build_exchangeable(gi),
            build_ma_band(gi, lag=1),
            build_covariate_block(gi, rng.normal(scale=0.6, size=n)),
        ])
        taus.append(np.array([rng.uniform(0.4, 0.7), rng.uniform(-0.03, 0.1),
                              rng.uniform(-0.08, 0.08), rng.uniform(-0.03, 0.05)]))
        mus.append(np.exp(rng.normal(loc=1.0, scale=0.4, size=n)))
    n_rho = n_responses * (n_responses - 1) // 2
    state = DispersionState(
        rho=rng.uniform(-rho_scale, rho_scale, size=n_rho),
        power=rng.choice([1.0, 1.5, 2.0, 3.0], size=n_responses),
        tau=tuple(taus))
    return gi, comps, mus, state


def oracle_dense(gi, comps, mus, state):
    """Literal construction: Bdiag(chol(Sigma_r)) (Sigma_b kron I) Bdiag(...)'. """
    n = gi.n
    rr = len(mus)
    chols = []
    for r in range(rr):
        omega = sum(t * dense_from_blocks(z, gi)
                    for t, z in zip(state.tau[r], comps[r]))
        vhalf = np.diag(mus[r] ** (state.power[r] / 2.0))
        sigma = np.diag(mus[r]) + vhalf @ omega @ vhalf
        chols.append(np.linalg.cholesky(sigma))
    big = block_diag(*chols)
    sigma_b = np.eye(rr)
    iu = np.triu_indices(rr, k=1)
    sigma_b[iu] = state.rho
    sigma_b[(iu[1], iu[0])] = state.rho
    return big @ np.kron(sigma_b, np.eye(n)) @ big.T


def all_params(state):
    out = [ParamId("rho", index=k) for k in range(state.rho.shape[0])]
    out += [ParamId("power", response=r) for r in range(state.n_responses)]
    for r, t in enumerate(state.tau):
        out += [ParamId("tau", response=r, index=d) for d in range(t.shape[0])]
    return out


def perturb(state, pid, h):
    rho, power = state.rho.copy(), state.power.copy()
    tau = [t.copy() for t in state.tau]
    if pid.kind == "rho":
        rho[pid.index] += h
    elif pid.kind == "power":
        power[pid.response] += h
    else:
        tau[pid.response][pid.index] += h
    return DispersionState(rho=rho, power=power, tau=tuple(tau))


# -- small closed forms ---------------------------------------------------------


def test_cross_correlation_matrix_row_major_order():
    s = cross_correlation_matrix(np.array([0.1, 0.2, 0.3]), 3)
    expected = np.array([[1.0, 0.1, 0.2], [0.1, 1.0, 0.3], [0.2, 0.3, 1.0]])
    assert_array_equal(s, expected)


def test_matrix_linear_predictor_combines_blocks():
    z0, z1 = np.eye(2), np.ones((2, 2))
    out = matrix_linear_predictor(np.array([2.0, 3.0]), [z0, z1])
    assert_array_equal(out, np.array([[5.0, 3.0], [3.0, 5.0]]))


def test_response_covariance_power_two_is_quadratic_overdispersion():
    mu = np.array([0.5, 2.0, 7.0])
    tau0 = 0.3
    sig = response_covariance(mu, 2.0, tau0 * np.eye(3))
    assert_allclose(np.diag(sig), mu + tau0 * mu ** 2, rtol=1e-14)
    assert_array_equal(sig - np.diag(np.diag(sig)), np.zeros((3, 3)))


def test_response_covariance_power_one_scales_the_mean():
    mu = np.array([0.5, 2.0, 7.0])
    tau0 = 0.3
    sig = response_covariance(mu, 1.0, tau0 * np.eye(3))
    assert_allclose(np.diag(sig), mu * (1.0 + tau0), rtol=1e-14)


def test_unit_mean_identity_family_closed_form():
    # mu = 1 makes the covariance (1 + tau0) I for every power value
    gi = GroupIndex.from_labels(group=np.zeros(6), time=np.arange(6.0))
    comps = [[build_identity(gi)]]
    tau0 = 0.4
    state = DispersionState(rho=np.zeros(0), power=[1.7],
                            tau=(np.array([tau0]),))
    cov = JointCovariance(gi, comps, [np.ones(6)], state)
    assert_allclose(cov.cov_blocks[0], (1.0 + tau0) * np.eye(6), rtol=1e-14)
    assert_allclose(cov.derivative_block(0, ParamId("tau", 0, 0)), np.eye(6), rtol=0)
    w = cov.inv_blocks[0] @ cov.derivative_block(0, ParamId("tau", 0, 0)) @ cov.inv_blocks[0]
    assert_allclose(w, (1.0 + tau0) ** -2 * np.eye(6), rtol=1e-12)


def test_single_response_joint_block_is_response_block_bit_exact():
    gi, comps, mus, state = make_case(3, n_responses=1)
    cov = JointCovariance(gi, comps, mus, state)
    for g, idx in enumerate(gi.rows):
        omega = matrix_linear_predictor(state.tau[0], [z.blocks[g] for z in comps[0]])
        direct = response_covariance(mus[0][idx], state.power[0], omega)
        assert np.array_equal(cov.cov_blocks[g], direct)


def test_zero_cross_correlation_gives_exactly_zero_off_blocks():
    gi, comps, mus, state = make_case(4, n_responses=2, rho_scale=0.0)
    assert_array_equal(state.rho, np.zeros(1))
    cov = JointCovariance(gi, comps, mus, state)
    o = gi.rows[0].size
    for g in range(gi.n_groups):
        c = cov.cov_blocks[g]
        assert_array_equal(c[:o, o:], np.zeros((o, o)))
        assert_array_equal(c[o:, :o], np.zeros((o, o)))


# -- dense-oracle agreement ------------------------------------------------------


@pytest.mark.parametrize("seed,rr", [(11, 1), (12, 2), (13, 3)])
def test_joint_covariance_matches_literal_kronecker_oracle(seed, rr):
    gi, comps, mus, state = make_case(seed, n_responses=rr)
    cov = JointCovariance(gi, comps, mus, state)
    dense = cov.dense()
    expected = oracle_dense(gi, comps, mus, state)
    assert_allclose(dense, expected, rtol=1e-11, atol=1e-11)
    sign, logdet = np.linalg.slogdet(expected)
    assert sign > 0
    assert_allclose(cov.logdet, logdet, rtol=1e-10)


def test_inverse_blocks_match_dense_inverse():
    gi, comps, mus, state = make_case(21, n_responses=2)
    cov = JointCovariance(gi, comps, mus, state)
    dense_inv = np.linalg.inv(cov.dense())
    for g in range(gi.n_groups):
        jr = cov.joint_rows(g)
        assert_allclose(cov.inv_blocks[g], dense_inv[np.ix_(jr, jr)],
                        rtol=1e-9, atol=1e-11)


def test_solve_and_quadratic_form_match_dense():
    gi, comps, mus, state = make_case(22, n_responses=2)
    cov = JointCovariance(gi, comps, mus, state)
    rng = np.random.default_rng(5)
    v = rng.normal(size=2 * gi.n)
    dense = cov.dense()
    assert_allclose(cov.solve_stacked(v), np.linalg.solve(dense, v), rtol=1e-9)
    assert_allclose(cov.quadratic_form(v), v @ np.linalg.solve(dense, v), rtol=1e-9)


# -- derivatives -------------------------------------------------------------------


def test_cholesky_derivative_matches_finite_differences():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(6, 6))
    sigma = a @ a.T + 6 * np.eye(6)
    d = rng.normal(size=(6, 6))
    dsigma = d + d.T
    ell = np.linalg.cholesky(sigma)
    h = 1e-6
    fd = (np.linalg.cholesky(sigma + h * dsigma)
          - np.linalg.cholesky(sigma - h * dsigma)) / (2 * h)
    assert_allclose(cholesky_derivative(ell, dsigma), fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("seed,rr", [(31, 1), (32, 2), (33, 3)])
def test_parameter_derivatives_match_dense_finite_differences(seed, rr):
    gi, comps, mus, state = make_case(seed, n_responses=rr)
    cov = JointCovariance(gi, comps, mus, state)
    h = 1e-6
    for pid in all_params(state):
        up = JointCovariance(gi, comps, mus, perturb(state, pid, h)).dense()
        dn = JointCovariance(gi, comps, mus, perturb(state, pid, -h)).dense()
        fd = (up - dn) / (2 * h)
        analytic = cov.dense_derivative(pid)
        scale = max(np.max(np.abs(analytic)), 1.0)
        assert np.max(np.abs(analytic - fd)) / scale < 1e-6, pid


def test_derivative_blocks_are_symmetric():
    gi, comps, mus, state = make_case(41, n_responses=2)
    cov = JointCovariance(gi, comps, mus, state)
    for pid in all_params(state):
        for g in range(gi.n_groups):
            blk = cov.derivative_block(g, pid)
            assert_array_equal(blk, blk.T)


# -- feasibility --------------------------------------------------------------------


def test_nonpositive_definite_block_raises_infeasible():
    gi = GroupIndex.from_labels(group=np.zeros(4), time=np.arange(4.0))
    comps = [[build_identity(gi)]]
    state = DispersionState(rho=np.zeros(0), power=[1.0], tau=(np.array([-2.0]),))
    with pytest.raises(InfeasibleParameterError):
        JointCovariance(gi, comps, [np.ones(4)], state)


def test_invalid_cross_correlation_raises_infeasible():
    gi, comps, mus, state = make_case(51, n_responses=2)
    bad = DispersionState(rho=np.array([1.3]), power=state.power, tau=state.tau)
    with pytest.raises(InfeasibleParameterError):
        JointCovariance(gi, comps, mus, bad)


def test_nonpositive_mean_raises_infeasible():
    gi = GroupIndex.from_labels(group=np.zeros(3), time=np.arange(3.0))
    comps = [[build_identity(gi)]]
    state = DispersionState(rho=np.zeros(0), power=[1.0], tau=(np.array([0.5]),))
    with pytest.raises(InfeasibleParameterError):
        JointCovariance(gi, comps, [np.array([1.0, -0.5, 2.0])], state)


def test_state_validation_errors():
    with pytest.raises(SpecificationError):
        DispersionState(rho=np.zeros(1), power=[1.0], tau=(np.array([0.1]),))
    with pytest.raises(SpecificationError):
        DispersionState(rho=np.zeros(0), power=[1.0], tau=())
