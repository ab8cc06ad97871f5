import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial.transform import Rotation

from src.core import apple
from src.core.apple import (
    AppleContext,
    FusionObjective,
    PoseObjective,
    associate_components,
    build_context,
    default_coefficient_variance,
    feedback_messages,
    final_map,
    init_messages,
    project_pose_to_antennas,
    triangulate,
    update_pose_messages,
)
from src.core.baseline import run_baseline
from src.core.channel import ReceivedSignal, scenario_poses, simulate_received
from src.core.circular import GaussianBelief, laplace_fit, numeric_gradient, numeric_jacobian
from src.core.exceptions import InvalidInputError, NumericalError
from src.core.geometry import euler_from_matrix, rotation_basis, rotation_matrix
from src.core.mcrb import compute_bound
from src.core.partition import uniform_partition
from src.models.schemas import AppleConfig, AttitudePrior, PoseConfig, UraSpec
from src.services.experiment_service import match_estimates, pose_errors

from tests.conftest import make_scenario, swff_signal


def test_association_labels():
    a0, b0 = np.array([0.5, 0.1]), np.array([-0.3, -0.2])
    shift = np.array([0.01, -0.01])
    cosines = np.array([
        [[b0, a0], [a0 + shift, b0 + shift]],                  # anchor subarray
        [[a0 - shift, b0 - shift], [b0 + 2 * shift, a0 + 2 * shift]],
    ])
    magnitudes = np.array([[[0.5, 2.0], [2.0, 0.5]], [[2.0, 0.5], [0.5, 2.0]]])
    perm = associate_components(cosines, magnitudes, anchor=0)
    # label 0 is the strongest anchor component at the first slot
    assert perm[0, 0].tolist() == [1, 0]
    assert perm[0, 1].tolist() == [0, 1]
    assert perm[1, 0].tolist() == [0, 1]
    assert perm[1, 1].tolist() == [1, 0]


def test_fusion_objective_derivatives(rng):
    refs = np.column_stack([rng.uniform(-0.1, 0.1, (5, 2)), np.zeros(5)])
    objective = FusionObjective(refs, rng.uniform(-1, 1, (5, 2)), rng.uniform(1, 50, (5, 2)))
    for _ in range(20):
        p = rng.normal(size=3) * 0.5 + np.array([0.0, 0.0, 2.0])
        assert_allclose(objective.gradient(p), numeric_gradient(objective.value, p, 1e-7),
                        rtol=1e-5, atol=1e-6)
        assert_allclose(objective.hessian(p), numeric_jacobian(objective.gradient, p, 1e-7),
                        rtol=1e-5, atol=1e-5)


def test_fusion_objective_exclusion():
    refs = np.zeros((3, 3))
    kappa = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    assert FusionObjective(refs, np.zeros((3, 2)), kappa).informative
    assert not FusionObjective(refs, np.zeros((3, 2)), kappa, exclude=0).informative


def test_pose_objective_derivatives(rng):
    local = rng.uniform(-0.01, 0.01, (5, 2))
    means = rng.normal(size=(5, 3)) * 0.1 + np.array([0.3, 0.2, 2.0])
    factors = rng.normal(size=(5, 3, 3))
    precisions = np.einsum("tij,tkj->tik", factors, factors) + np.eye(3)
    include = np.array([True, True, False, True, True])
    prior = AttitudePrior(chi=(0.1, 0.2, -0.3), kappa=(1.0, 2.0, 3.0))
    objective = PoseObjective(local, means, precisions, include, 5.0, prior)
    for _ in range(20):
        x = np.concatenate([rng.normal(size=3) + [0, 0, 2], rng.uniform(-1, 1, 3)])
        assert_allclose(objective.gradient(x), numeric_gradient(objective.value, x, 1e-7),
                        rtol=1e-5, atol=1e-6)
        assert_allclose(objective.hessian(x), numeric_jacobian(objective.gradient, x, 1e-7),
                        rtol=1e-5, atol=1e-5)


def test_triangulate_exact_rays():
    refs = np.array([[-0.05, -0.05, 0.0], [0.05, 0.05, 0.0], [0.05, -0.05, 0.0]])
    point = np.array([0.4, -0.3, 2.0])
    diff = point - refs
    chi = np.pi * diff[:, :2] / np.linalg.norm(diff, axis=1, keepdims=True)
    assert_allclose(triangulate(refs, chi, np.full((3, 2), 100.0), 5.0), point, atol=1e-9)


def test_triangulate_fallbacks():
    refs = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
    kappa = np.array([[10.0, 10.0], [0.0, 0.0]])
    point = triangulate(refs, np.zeros((2, 2)), kappa, 4.0)
    assert_allclose(point, [0.0, 0.0, 4.0])
    assert_allclose(triangulate(refs, np.zeros((2, 2)), np.zeros((2, 2)), 4.0), apple.INITIAL_MEAN)


def test_default_coefficient_variance(small_scenario):
    lam = small_scenario.wavelength
    expected = lam ** 2 * small_scenario.tx_power_w / (4 * math.pi * 6.5) ** 2
    assert default_coefficient_variance(small_scenario) == pytest.approx(expected)


def test_projection_through_rotation(small_scenario, small_plan):
    ctx = build_context(small_scenario, small_plan, AppleConfig(), small_scenario.noise_power_w)
    state = init_messages(small_plan.num_subarrays, 1, len(ctx.local), AppleConfig())
    state.position_mean[0, 1] = [0.3, -0.2, 1.2]
    state.position_cov[0, 1] = 1e-4 * np.eye(3)
    state.attitude_mean[0, 1] = [0.2, -0.1, 0.4]
    state.attitude_cov[0, 1] = 1e-2 * np.eye(3)
    belief = project_pose_to_antennas(state, ctx, 0, 1)
    expected = np.array([0.3, -0.2, 1.2]) + rotation_basis([0.2, -0.1, 0.4]).matrix @ ctx.local[1]
    assert_allclose(belief.mean, expected)
    assert belief.is_psd()
    assert np.all(np.linalg.eigvalsh(belief.covariance) >= 1e-4 - 1e-12)


def test_noiseless_single_ms_recovers_pose(desk_scenario, desk_plan):
    signal = swff_signal(desk_scenario, desk_plan)
    result = apple.run(signal, desk_scenario, desk_plan)
    truth = scenario_poses(desk_scenario)
    assert result.iterations == 1
    assert len(result.estimates) == 1
    position_sq, rotation_nmse = pose_errors(result.estimates, truth)
    assert math.sqrt(position_sq) < 1e-4
    assert rotation_nmse < 1e-8
    assert result.estimates[0].covariance.shape == (6, 6)


def test_guard_noise_estimate(small_scenario, small_plan):
    signal = simulate_received(small_scenario, np.random.default_rng(2))
    guard = np.full((small_scenario.bs.num_antennas, 8), 1e-5 + 0j)
    result = apple.run(signal, small_scenario, small_plan, AppleConfig(noise_mode="guard"), guard=guard)
    assert result.noise_power == pytest.approx(1e-10)


def test_signal_shape_mismatch(small_scenario, small_plan):
    signal = ReceivedSignal(np.zeros((64, 5), dtype=complex))
    with pytest.raises(InvalidInputError):
        apple.run(signal, small_scenario, small_plan)


D = 0.004
SQUARE = np.array([[-D, -D], [D, -D], [D, D], [-D, D]])
LINE = np.array([[-2 * D, 0.0], [-D, 0.0], [D, 0.0], [2 * D, 0.0]])
TRUTH = np.array([0.3, -0.2, 1.2, 0.2, -0.1, 0.4])
FLAT = AppleConfig(attitude_prior=AttitudePrior(kappa=(0.0, 0.0, 0.0)))


def pose_context(plan, local, cfg=FLAT) -> AppleContext:
    return AppleContext(plan, np.asarray(local, dtype=float), cfg, 1e-10, 1.0, 2.0)


def antenna_state(ctx, pose=TRUTH, variance=1e-4, num_subarrays=1):
    """Fused antenna beliefs sitting exactly on the antennas of one MS"""
    state = init_messages(num_subarrays, 1, len(ctx.local), ctx.cfg)
    state.fused_mean[0] = pose[:3] + ctx.local @ rotation_basis(pose[3:]).matrix.T
    state.fused_cov[0] = variance * np.eye(3)
    state.position_mean[0] = pose[:3]
    state.attitude_mean[0] = pose[3:]
    return state


def test_pose_messages_match_procrustes(small_plan, rng):
    ctx = pose_context(small_plan, SQUARE)
    state = antenna_state(ctx)
    state.fused_mean[0] += rng.normal(scale=1e-4, size=(4, 3))
    update_pose_messages(state, ctx, 0)
    assert state.flags["pose_regularized"] == 0

    local3 = np.column_stack([SQUARE, np.zeros(4)])
    for t in range(4):
        keep = np.arange(4) != t
        world = state.fused_mean[0, keep]
        rot = Rotation.align_vectors(world - world.mean(axis=0),
                                     local3[keep] - local3[keep].mean(axis=0))[0].as_matrix()
        position = world.mean(axis=0) - rot @ local3[keep].mean(axis=0)
        assert_allclose(state.position_mean[0, t], position, atol=1e-7)
        assert_allclose(rotation_basis(state.attitude_mean[0, t]).matrix, rot[:, :2], atol=1e-6)


def test_collinear_pattern_regularizes_pose_messages(small_plan):
    ctx = pose_context(small_plan, LINE)
    state = update_pose_messages(antenna_state(ctx), ctx, 0)
    # roll about the antenna line is unobservable in every leave-one-out fit
    assert state.flags["pose_regularized"] == 4
    for t in range(4):
        assert_allclose(state.position_mean[0, t], TRUTH[:3], atol=1e-7)


def test_leave_one_slot_out_with_two_slots(small_plan):
    ctx = pose_context(small_plan, SQUARE[:2])
    state = update_pose_messages(antenna_state(ctx), ctx, 0)
    moved = antenna_state(ctx)
    moved.fused_mean[0, 0] += [0.05, -0.02, 0.1]
    update_pose_messages(moved, ctx, 0)

    # the slot-0 message only sees slot 1
    assert_array_equal(moved.position_mean[0, 0], state.position_mean[0, 0])
    assert_array_equal(moved.attitude_mean[0, 0], state.attitude_mean[0, 0])
    assert not np.allclose(moved.position_mean[0, 1], state.position_mean[0, 1])
    for t, other in ((0, 1), (1, 0)):
        antenna = state.position_mean[0, t] + rotation_basis(state.attitude_mean[0, t]).matrix @ ctx.local[other]
        assert_allclose(antenna, state.fused_mean[0, other], atol=1e-6)


def test_final_map_follows_concentrated_priors(small_plan):
    prior = AttitudePrior(chi=(0.1, 0.4, -0.2), kappa=(1e8, 1e8, 1e8))
    cfg = AppleConfig(position_prior_std=1e-7, attitude_prior=prior)
    ctx = pose_context(small_plan, SQUARE, cfg)
    estimate = final_map(antenna_state(ctx), ctx)[0]
    assert_allclose(estimate.position, np.zeros(3), atol=1e-6)
    # pitch prior lives on twice the angle
    assert_allclose(estimate.attitude.as_array(), [0.1, 0.2, -0.2], atol=1e-6)


def test_final_map_is_equivariant_under_a_global_frame_change(small_plan, rng):
    ctx = pose_context(small_plan, SQUARE)
    state = antenna_state(ctx)
    state.fused_mean[0] += rng.normal(scale=5e-4, size=(4, 3))
    factors = rng.normal(scale=1e-2, size=(4, 3, 3))
    state.fused_cov[0] = np.einsum("tij,tkj->tik", factors, factors) + 1e-5 * np.eye(3)
    before = final_map(state, ctx)[0]

    turn = rotation_matrix([0.05, -0.08, 0.3])
    shift = np.array([0.1, -0.05, 0.2])
    moved = antenna_state(ctx)
    moved.fused_mean[0] = state.fused_mean[0] @ turn.T + shift
    covs = np.einsum("ij,tjk,lk->til", turn, state.fused_cov[0], turn)
    moved.fused_cov[0] = 0.5 * (covs + covs.transpose(0, 2, 1))
    moved.position_mean[0] = turn @ TRUTH[:3] + shift
    moved.attitude_mean[0] = euler_from_matrix(turn @ rotation_matrix(TRUTH[3:])).as_array()
    after = final_map(moved, ctx)[0]

    assert_allclose(after.position, turn @ before.position + shift, atol=1e-6)
    assert_allclose(after.basis.matrix, turn @ before.basis.matrix, atol=1e-6)


def test_feedback_with_one_subarray_is_the_projection(small_scenario):
    plan = uniform_partition(UraSpec(nx=8, ny=8), 1, 1, small_scenario.wavelength)
    ctx = pose_context(plan, SQUARE)
    state = antenna_state(ctx)
    state.position_cov[0] = 1e-4 * np.eye(3)
    state.attitude_cov[0] = 1e-2 * np.eye(3)
    projected = GaussianBelief(np.array([0.3, -0.2, 1.2]), np.diag([1e-4, 2e-4, 3e-4]))
    assert feedback_messages(state, ctx, 0, 0, 1, projected) is projected
    message = feedback_messages(state, ctx, 0, 0, 1)
    assert_allclose(message.mean, project_pose_to_antennas(state, ctx, 0, 1).mean)


def test_feedback_is_information_form_product(small_plan):
    ctx = pose_context(small_plan, SQUARE)
    state = antenna_state(ctx, num_subarrays=small_plan.num_subarrays)
    point = np.array([0.35, -0.15, 1.2])
    refs = small_plan.ref_positions()
    diff = point - refs
    state.ext_chi[:, 0, 1] = np.pi * diff[:, :2] / np.linalg.norm(diff, axis=1, keepdims=True)
    state.ext_kappa[:, 0, 1] = 200.0
    state.fused_mean[0, 1] = point
    projected = GaussianBelief(np.array([0.36, -0.14, 1.25]), np.diag([1e-4, 2e-4, 5e-3]))

    message = feedback_messages(state, ctx, 2, 0, 1, projected)

    objective = FusionObjective(refs, state.ext_chi[:, 0, 1], state.ext_kappa[:, 0, 1], exclude=2)
    fusion = laplace_fit(objective.value, point, ctx.cfg.ascent, objective.gradient, objective.hessian).belief
    lam_p = np.linalg.inv(projected.covariance)
    lam_f = np.linalg.inv(fusion.covariance)
    cov = np.linalg.inv(lam_p + lam_f)
    assert state.flags["feedback_dropped"] == 0
    assert_allclose(message.covariance, cov, rtol=1e-6, atol=1e-14)
    assert_allclose(message.mean, cov @ (lam_p @ projected.mean + lam_f @ fusion.mean), atol=1e-9)


def test_numerical_failure_inside_run_is_reported(small_scenario, small_plan, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("covariance is not symmetric")

    monkeypatch.setattr(apple, "aoa_module_pass", broken)
    with pytest.raises(NumericalError, match="APPLE: covariance is not symmetric"):
        apple.run(swff_signal(small_scenario, small_plan), small_scenario, small_plan)


def test_noisy_nearfield_scene_against_bound_and_baseline():
    scenario = make_scenario(
        bs=16, ms=4, parts=4, pattern="T5", tx_power_dbm=50.0,
        poses=[PoseConfig(x=0.4, y=-0.3, z=2.0, roll=0.2, pitch=-0.1, yaw=0.5)],
    )
    plan = uniform_partition(scenario.bs, 4, 4, scenario.wavelength)
    truth = scenario_poses(scenario)
    bound = compute_bound(scenario, plan, truth).position_bounds[0]

    apple_sq, baseline_sq = [], []
    for seed in range(3):
        signal = simulate_received(scenario, np.random.default_rng(seed))
        apple_sq.append(pose_errors(apple.run(signal, scenario, plan).estimates, truth)[0])
        baseline_sq.append(pose_errors(run_baseline(signal, scenario).estimates, truth)[0])
    apple_rmse = math.sqrt(np.mean(apple_sq))
    baseline_rmse = math.sqrt(np.mean(baseline_sq))

    assert bound > 0
    assert apple_rmse < 10 * bound
    assert apple_rmse < max(baseline_rmse, 0.05)


@pytest.mark.slow
def test_two_ms_noiseless():
    scenario = make_scenario(
        bs=16, ms=4, parts=2, pattern="T5",
        poses=[PoseConfig(x=0.9, y=0.6, z=2.0, roll=0.1, pitch=0.2, yaw=-0.3),
               PoseConfig(x=-0.8, y=-0.5, z=2.3, roll=-0.2, pitch=0.1, yaw=1.0)],
    )
    plan = uniform_partition(scenario.bs, 2, 2, scenario.wavelength)
    result = apple.run(swff_signal(scenario, plan), scenario, plan)
    truth = scenario_poses(scenario)
    assert result.iterations == 5
    estimates = match_estimates(result.estimates, truth)
    for est, pose in zip(estimates, truth):
        position_sq, rotation_nmse = pose_errors([est], [pose])
        assert math.sqrt(position_sq) < 5e-3
        assert rotation_nmse < 1e-2


@pytest.mark.slow
def test_reference_size_scene_noiseless():
    # 32x32 BS in 4x4 subarrays of 8x8, 16x16 MS
    scenario = make_scenario(
        bs=32, ms=16, parts=4, pattern="T5",
        poses=[PoseConfig(x=0.8, y=-0.6, z=5.0, roll=0.1, pitch=-0.2, yaw=0.6)],
    )
    plan = uniform_partition(scenario.bs, 4, 4, scenario.wavelength)
    result = apple.run(swff_signal(scenario, plan), scenario, plan)
    position_sq, rotation_nmse = pose_errors(result.estimates, scenario_poses(scenario))
    assert math.sqrt(position_sq) < 1e-3
    assert rotation_nmse < 1e-6
