"""Per-subarray multi-source 2-D AoA posterior estimation with von-Mises priors.

Fixed-order variational coordinate ascent: each source's coefficient has a
closed-form ridge posterior given its AoA, and the AoA maximizes the profiled
likelihood plus the VM log-prior. Concentrations come from the curvature at
the maximizer.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..models.schemas import AscentOptions
from .channel import local_indices, steering
from .circular import KAPPA_MAX, VmPair, laplace_fit, vm_pair_extrinsic

logger = logging.getLogger(__name__)

NOISE_FLOOR = 1e-30


@dataclass(frozen=True, eq=False)
class SubarraySnapshot:
    """Y_{m,t} as an (nx, ny) matrix with its noise power and source count"""
    samples: np.ndarray
    noise_power: float
    source_count: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.samples.shape

    @property
    def vector(self) -> np.ndarray:
        return self.samples.ravel(order="F")


@dataclass(frozen=True)
class SourcePrior:
    vm: VmPair
    coefficient_variance: float


@dataclass(frozen=True)
class AoaPosterior:
    vm: VmPair
    coefficient_mean: complex
    coefficient_variance: float
    flagged: bool = False

    @property
    def cosines(self) -> np.ndarray:
        return self.vm.cosines


def wrap_cosine(phi):
    return (np.asarray(phi, dtype=float) + 1.0) % 2.0 - 1.0


class ProfiledObjective:
    """Profiled log-likelihood plus VM log-prior of one source against a residual"""

    def __init__(self, residual: np.ndarray, nx: int, ny: int, noise: float,
                 denominator: float, prior: VmPair):
        self.residual = residual
        self.ii, self.jj = local_indices(nx, ny)
        self.scale = 1.0 / (noise * denominator)
        self.chi = prior.chi
        self.kappa = prior.kappa

    def _terms(self, phi):
        u = np.exp(-1j * np.pi * (phi[0] * self.ii + phi[1] * self.jj)) * self.residual
        s = u.sum()
        return u, s

    def value(self, phi) -> float:
        _, s = self._terms(phi)
        prior = self.kappa @ np.cos(np.pi * np.asarray(phi) - self.chi)
        return float(self.scale * abs(s) ** 2 + prior)

    def gradient(self, phi) -> np.ndarray:
        u, s = self._terms(phi)
        ds = np.array([(-1j * np.pi * self.ii * u).sum(), (-1j * np.pi * self.jj * u).sum()])
        grad = 2 * self.scale * np.real(np.conj(s) * ds)
        return grad - self.kappa * np.pi * np.sin(np.pi * np.asarray(phi) - self.chi)

    def hessian(self, phi) -> np.ndarray:
        u, s = self._terms(phi)
        idx = (self.ii, self.jj)
        ds = np.array([(-1j * np.pi * idx[a] * u).sum() for a in range(2)])
        hess = np.empty((2, 2))
        for a in range(2):
            for b in range(a, 2):
                d2 = (-np.pi ** 2 * idx[a] * idx[b] * u).sum()
                hess[a, b] = hess[b, a] = 2 * self.scale * np.real(np.conj(ds[a]) * ds[b] + np.conj(s) * d2)
        hess -= np.diag(self.kappa * np.pi ** 2 * np.cos(np.pi * np.asarray(phi) - self.chi))
        return hess

    def matched(self, phi) -> complex:
        _, s = self._terms(phi)
        return s


def _grid_peak(residual: np.ndarray, nx: int, ny: int, objective: ProfiledObjective,
               oversampling: int) -> np.ndarray:
    """Prior-weighted periodogram peak on a zero-padded cosine grid"""
    lx, ly = oversampling * nx, oversampling * ny
    spectrum = np.abs(np.fft.fft2(residual.reshape((nx, ny), order="F"), s=(lx, ly))) ** 2
    phi_x = wrap_cosine(2 * np.arange(lx) / lx)
    phi_y = wrap_cosine(2 * np.arange(ly) / ly)
    score = objective.scale * spectrum
    score = score + objective.kappa[0] * np.cos(np.pi * phi_x - objective.chi[0])[:, None]
    score = score + objective.kappa[1] * np.cos(np.pi * phi_y - objective.chi[1])[None, :]
    visible = phi_x[:, None] ** 2 + phi_y[None, :] ** 2 <= 1.0
    score = np.where(visible, score, -np.inf)
    p, q = np.unravel_index(int(np.argmax(score)), score.shape)
    return np.array([phi_x[p], phi_y[q]])


def variational_objective(snapshot: SubarraySnapshot, priors: Sequence[SourcePrior],
                          cosines: np.ndarray, coefficients: np.ndarray) -> float:
    """Snapshot log-likelihood at the current means plus log-priors (up to constants)"""
    nx, ny = snapshot.shape
    noise = max(snapshot.noise_power, NOISE_FLOOR)
    model = np.zeros(nx * ny, dtype=complex)
    total = 0.0
    for k, prior in enumerate(priors):
        model += coefficients[k] * steering(nx, ny, cosines[k])
        total -= abs(coefficients[k]) ** 2 / prior.coefficient_variance
        total += float(prior.vm.kappa @ np.cos(np.pi * cosines[k] - prior.vm.chi))
    return total - float(np.sum(np.abs(snapshot.vector - model) ** 2)) / noise


def estimate_aoa_posteriors(snapshot: SubarraySnapshot, priors: Sequence[SourcePrior],
                            max_sweeps: int = 20, tolerance: float = 1e-6,
                            oversampling: int = 4,
                            options: Optional[AscentOptions] = None,
                            trace: Optional[List[float]] = None) -> List[AoaPosterior]:
    """One posterior per source, in prior order"""
    if snapshot.source_count < 1 or len(priors) != snapshot.source_count:
        raise ValueError(f"{len(priors)} priors for {snapshot.source_count} sources")
    nx, ny = snapshot.shape
    noise = max(snapshot.noise_power, NOISE_FLOOR)
    y = snapshot.vector.astype(complex)
    count = snapshot.source_count

    denominators = np.array([nx * ny + noise / p.coefficient_variance for p in priors])
    cosines = np.zeros((count, 2))
    coefficients = np.zeros(count, dtype=complex)
    flagged = np.zeros(count, dtype=bool)
    curvature = np.zeros((count, 2, 2))
    # Stable sort keeps equal concentrations in index order
    order = np.argsort(-np.array([p.vm.kappa.sum() for p in priors]), kind="stable")

    def update(k: int, residual: np.ndarray, start: Optional[np.ndarray]):
        objective = ProfiledObjective(residual, nx, ny, noise, denominators[k], priors[k].vm)
        if start is None:
            start = _grid_peak(residual, nx, ny, objective, oversampling)
        fit = laplace_fit(objective.value, start, options,
                          gradient=objective.gradient, hessian=objective.hessian)
        phi = wrap_cosine(fit.belief.mean)
        flagged[k] = not fit.converged
        curvature[k] = objective.hessian(phi)
        coefficients[k] = objective.matched(phi) / denominators[k]
        cosines[k] = phi

    residual = y.copy()
    for k in order:
        update(k, residual, None)
        residual = residual - coefficients[k] * steering(nx, ny, cosines[k])
    if trace is not None:
        trace.append(variational_objective(snapshot, priors, cosines, coefficients))

    for sweep in range(max_sweeps):
        moved = 0.0
        for k in order:
            previous = cosines[k].copy()
            source_residual = residual + coefficients[k] * steering(nx, ny, cosines[k])
            update(k, source_residual, previous)
            residual = source_residual - coefficients[k] * steering(nx, ny, cosines[k])
            moved = max(moved, float(np.max(np.abs(wrap_cosine(cosines[k] - previous)))))
        if trace is not None:
            trace.append(variational_objective(snapshot, priors, cosines, coefficients))
        if moved < tolerance:
            break

    posteriors = []
    for k, prior in enumerate(priors):
        kappa = -np.diag(curvature[k]) / np.pi ** 2
        bad = kappa <= 0
        if np.any(bad):
            kappa = np.where(bad, prior.vm.kappa, kappa)
            flagged[k] = True
        kappa = np.minimum(kappa, KAPPA_MAX)
        vm = VmPair.from_arrays(np.pi * cosines[k], kappa)
        posteriors.append(AoaPosterior(vm, complex(coefficients[k]),
                                       float(noise / denominators[k]), bool(flagged[k])))
    return posteriors


def extrinsic_from_posterior(posteriors: Sequence[AoaPosterior],
                             priors: Sequence[SourcePrior]) -> List[VmPair]:
    if len(posteriors) != len(priors):
        raise ValueError("posterior and prior lists differ in length")
    return [vm_pair_extrinsic(post.vm, prior.vm) for post, prior in zip(posteriors, priors)]
