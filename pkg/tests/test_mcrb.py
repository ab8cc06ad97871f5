from collections import Counter

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.circular import numeric_jacobian
from src.core.exceptions import ConditioningError, InvalidInputError
from src.core.mcrb import (
    ParamVector,
    SwffModel,
    _inverse,
    compute_bound,
    information_matrices,
    lower_bound,
    mu_ff,
    pseudotrue_fit,
    rotation_nmse_bound,
    truth_parameters,
)
from src.models.schemas import McrbOptions


def test_param_vector_layout():
    rho = (np.arange(8) + 1j * np.arange(8, 16)).reshape(2, 1, 4)
    params = ParamVector(np.arange(6.0), rho)
    flat = params.gamma_ff
    assert flat.size == 6 + 16
    # (re, im) interleaved in (m, k, t) order
    assert_allclose(flat[6:10], [0, 8, 1, 9])
    back = ParamVector.from_gamma_ff(flat, rho.shape)
    assert_allclose(back.rho, rho)
    with pytest.raises(InvalidInputError):
        ParamVector(np.zeros(5), rho)


def test_swff_mean_matches_channel_layout(small_scenario, small_plan):
    truth = truth_parameters(small_scenario, small_plan)
    model = SwffModel(small_scenario, small_plan)
    mean = mu_ff(truth, small_scenario, small_plan)
    assert mean.shape == (small_scenario.bs.num_antennas * model.num_slots,)
    exact = model.mu(truth.gamma)
    # the first-order model is close to the exact one in this regime
    assert np.linalg.norm(exact - mean) / np.linalg.norm(exact) < 0.2


def test_rotation_nmse_bound_at_identity():
    assert rotation_nmse_bound(np.zeros(3), 0.5 * np.eye(3)) == pytest.approx(1.0)


def independent_crb(model, truth, sigma2):
    """Pose block of the CRB via the Schur complement of a numeric Fisher matrix"""
    gamma, rho = truth.gamma, truth.rho
    pose_jac = numeric_jacobian(lambda g: model.mu_ff(g, rho), gamma, 1e-6)
    columns = []
    for idx in np.ndindex(rho.shape):
        unit = np.zeros(rho.shape, dtype=complex)
        unit[idx] = 1.0
        a = model.mu_ff(gamma, unit)
        columns += [a, 1j * a]
    jac = np.column_stack([pose_jac] + columns)
    fisher = (2.0 / sigma2) * np.real(jac.conj().T @ jac)
    n = gamma.size
    f_pp, f_pr, f_rr = fisher[:n, :n], fisher[:n, n:], fisher[n:, n:]
    schur = f_pp - f_pr @ np.linalg.solve(f_rr, f_pr.T)
    return np.linalg.inv(schur)


def test_bound_collapses_to_crb_without_mismatch(small_scenario, small_plan):
    truth = truth_parameters(small_scenario, small_plan)
    signal = mu_ff(truth, small_scenario, small_plan)
    fit = pseudotrue_fit(truth, small_scenario, small_plan, truth_signal=signal)
    assert fit.residual < 1e-20
    assert_allclose(fit.params.gamma, truth.gamma, atol=1e-9)

    sigma2 = small_scenario.noise_power_w
    a_mat, b_mat = information_matrices(fit.params, truth, small_scenario, small_plan, truth_signal=signal)
    result = lower_bound(a_mat, b_mat, fit.params, truth)
    crb = independent_crb(SwffModel(small_scenario, small_plan), truth, sigma2)
    assert_allclose(np.diag(result.lb), np.diag(crb), rtol=1e-3)
    assert_allclose(result.lb, crb, rtol=1e-3, atol=1e-3 * float(np.max(np.abs(np.diag(crb)))))


def test_bound_is_symmetric_psd(small_scenario, small_plan):
    result = compute_bound(small_scenario, small_plan)
    lb = result.lb
    assert lb.shape == (6, 6)
    assert_allclose(lb, lb.T, atol=1e-14 * np.max(np.abs(lb)))
    eig = np.linalg.eigvalsh(lb)
    assert eig.min() >= -1e-9 * eig.max()
    assert result.position_bounds.shape == (1,)
    assert np.all(result.position_bounds > 0)
    assert np.all(result.rotation_nmse_bounds >= 0)
    assert result.residual > 0


def test_bound_is_affine_in_noise_power(small_scenario, small_plan):
    truth = truth_parameters(small_scenario, small_plan)
    fit = pseudotrue_fit(truth, small_scenario, small_plan)
    sigma2 = small_scenario.noise_power_w
    cores = []
    for scale in (1.0, 10.0, 100.0):
        a_mat, b_mat = information_matrices(fit.params, truth, small_scenario, small_plan,
                                            noise_power=scale * sigma2)
        result = lower_bound(a_mat, b_mat, fit.params, truth)
        cores.append(np.diag(result.lb))
    # the sigma^2-free part cancels in the differences
    assert_allclose(cores[2] - cores[1], 10.0 * (cores[1] - cores[0]), rtol=1e-3)


def _start_residual(truth, scenario, plan):
    model = SwffModel(scenario, plan)
    target = model.mu(truth.gamma)
    _, residual = model.solve_coefficients(truth.gamma, target)
    return residual / float(np.sum(np.abs(target) ** 2))


def test_pseudotrue_search_never_regresses(small_scenario, small_plan):
    truth = truth_parameters(small_scenario, small_plan)
    start = _start_residual(truth, small_scenario, small_plan)
    quasi = pseudotrue_fit(truth, small_scenario, small_plan)
    grid = pseudotrue_fit(truth, small_scenario, small_plan,
                          McrbOptions(pseudotrue_method="grid", grid_rounds=4))
    assert 0 < quasi.residual <= start
    assert 0 < grid.residual <= start
    assert grid.converged


def test_noise_power_must_be_positive(small_scenario, small_plan):
    truth = truth_parameters(small_scenario, small_plan)
    with pytest.raises(InvalidInputError):
        information_matrices(truth, truth, small_scenario, small_plan, noise_power=0.0)


def test_inverse_rejects_non_finite_matrix():
    flags = Counter()
    a_mat = np.diag([2.0, 4.0])
    assert_allclose(_inverse(a_mat, 1e12, flags), np.diag([0.5, 0.25]))
    a_mat[0, 1] = a_mat[1, 0] = np.nan
    with pytest.raises(ConditioningError, match="non-finite"):
        _inverse(a_mat, 1e12, flags)
    assert not flags


def test_singular_information_falls_back_to_pseudo_inverse():
    flags = Counter()
    inv = _inverse(np.array([[1.0, 1.0], [1.0, 1.0]]), 1e12, flags)
    assert flags["ill_conditioned"] == 1
    assert_allclose(inv, np.full((2, 2), 0.25))
