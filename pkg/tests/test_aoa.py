import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.aoa import (
    ProfiledObjective,
    SourcePrior,
    SubarraySnapshot,
    estimate_aoa_posteriors,
    extrinsic_from_posterior,
    wrap_cosine,
)
from src.core.channel import steering
from src.core.circular import VmPair, numeric_gradient, numeric_jacobian


def snapshot_of(nx, ny, sources, noise_power=1e-6, rng=None):
    y = np.zeros(nx * ny, dtype=complex)
    for rho, phi in sources:
        y += rho * steering(nx, ny, phi)
    if rng is not None:
        y += np.sqrt(noise_power / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return SubarraySnapshot(y.reshape((nx, ny), order="F"), noise_power, len(sources))


def uniform_priors(count, variance=1.0):
    return [SourcePrior(VmPair.uniform(), variance) for _ in range(count)]


def test_wrap_cosine():
    assert_allclose(wrap_cosine([0.5, 1.5, -1.25, 1.0]), [0.5, -0.5, 0.75, -1.0])


def test_objective_derivatives(rng):
    y = rng.normal(size=64) + 1j * rng.normal(size=64)
    prior = VmPair.from_arrays([0.4, -1.1], [3.0, 5.0])
    objective = ProfiledObjective(y, 8, 8, 0.5, 70.0, prior)
    for _ in range(50):
        phi = rng.uniform(-0.7, 0.7, size=2)
        grad = objective.gradient(phi)
        assert_allclose(grad, numeric_gradient(objective.value, phi, 1e-7), rtol=1e-5, atol=1e-6)
        assert_allclose(objective.hessian(phi), numeric_jacobian(objective.gradient, phi, 1e-7),
                        rtol=1e-5, atol=1e-5)


def test_single_source_noiseless():
    phi = np.array([0.31, -0.27])
    snap = snapshot_of(8, 8, [(0.02 - 0.01j, phi)], noise_power=1e-8)
    (post,) = estimate_aoa_posteriors(snap, uniform_priors(1, 1e-3))
    assert_allclose(post.cosines, phi, atol=1e-8)
    assert not post.flagged
    assert np.all(post.vm.kappa > 0)
    # coefficient is the ridge posterior mean
    assert abs(post.coefficient_mean - (0.02 - 0.01j)) < 1e-4


def test_two_sources_separated():
    truth = [(1.0, np.array([0.5, 0.1])), (0.7j, np.array([-0.4, -0.3]))]
    snap = snapshot_of(16, 16, truth, noise_power=1e-6)
    posteriors = estimate_aoa_posteriors(snap, uniform_priors(2))
    found = sorted((tuple(p.cosines) for p in posteriors), reverse=True)
    assert_allclose(found[0], truth[0][1], atol=1e-4)
    assert_allclose(found[1], truth[1][1], atol=1e-4)


def test_prior_order_is_kept():
    # priors sharp enough to override the stronger periodogram peak
    truth = [(1.0, np.array([0.5, 0.1])), (0.8, np.array([-0.4, -0.3]))]
    snap = snapshot_of(16, 16, truth, noise_power=1e-6)
    priors = [SourcePrior(VmPair.from_arrays(np.pi * truth[1][1], [1e10, 1e10]), 1.0),
              SourcePrior(VmPair.from_arrays(np.pi * truth[0][1], [1e10, 1e10]), 1.0)]
    posteriors = estimate_aoa_posteriors(snap, priors)
    assert_allclose(posteriors[0].cosines, truth[1][1], atol=1e-3)
    assert_allclose(posteriors[1].cosines, truth[0][1], atol=1e-3)


def test_objective_trace_is_monotone():
    rng = np.random.default_rng(11)
    truth = [(1.0, np.array([0.2, 0.25])), (0.9, np.array([0.05, 0.1]))]
    snap = snapshot_of(8, 8, truth, noise_power=0.05, rng=rng)
    trace = []
    estimate_aoa_posteriors(snap, uniform_priors(2), max_sweeps=30, trace=trace)
    assert len(trace) >= 2
    steps = np.diff(trace)
    assert np.all(steps >= -1e-8 * np.abs(trace[1:]))


def test_extrinsic_of_uniform_prior_is_posterior():
    snap = snapshot_of(8, 8, [(0.05, np.array([0.1, 0.2]))], noise_power=1e-6)
    priors = uniform_priors(1, 1e-2)
    posteriors = estimate_aoa_posteriors(snap, priors)
    (ext,) = extrinsic_from_posterior(posteriors, priors)
    assert_allclose(ext.chi, posteriors[0].vm.chi)
    assert_allclose(ext.kappa, posteriors[0].vm.kappa)


def test_prior_count_mismatch():
    snap = snapshot_of(4, 4, [(1.0, np.zeros(2))])
    with pytest.raises(ValueError):
        estimate_aoa_posteriors(snap, uniform_priors(2))
