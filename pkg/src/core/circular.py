"""Von-Mises algebra, Gaussian to von-Mises conversion and Laplace approximation"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import i0e

from ..models.schemas import AscentOptions
from .exceptions import ConvergenceError, GeometryError
from .geometry import wrap_angle

logger = logging.getLogger(__name__)

KAPPA_MAX = 1e12
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class VonMises:
    """Mean direction chi in [-pi, pi), concentration kappa in [0, KAPPA_MAX]"""
    chi: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if math.isnan(self.chi) or math.isnan(self.kappa):
            raise ValueError("von Mises parameters must not be NaN")
        object.__setattr__(self, "chi", float(wrap_angle(self.chi)))
        object.__setattr__(self, "kappa", float(min(max(self.kappa, 0.0), KAPPA_MAX)))

    def as_complex(self) -> complex:
        return self.kappa * complex(math.cos(self.chi), math.sin(self.chi))

    @classmethod
    def from_complex(cls, z: complex) -> "VonMises":
        if z == 0:
            return cls(0.0, 0.0)
        return cls(math.atan2(z.imag, z.real), abs(z))


@dataclass(frozen=True)
class VmPair:
    """Beliefs over (pi*phi_x, pi*phi_y)"""
    vx: VonMises
    vy: VonMises

    @property
    def chi(self) -> np.ndarray:
        return np.array([self.vx.chi, self.vy.chi])

    @property
    def kappa(self) -> np.ndarray:
        return np.array([self.vx.kappa, self.vy.kappa])

    @property
    def cosines(self) -> np.ndarray:
        return self.chi / np.pi

    @classmethod
    def uniform(cls) -> "VmPair":
        return cls(VonMises(), VonMises())

    @classmethod
    def from_arrays(cls, chi, kappa) -> "VmPair":
        return cls(VonMises(float(chi[0]), float(kappa[0])), VonMises(float(chi[1]), float(kappa[1])))


def log_i0(kappa):
    """log I0(kappa), stable for large kappa"""
    kappa = np.asarray(kappa, dtype=float)
    return np.log(i0e(kappa)) + np.abs(kappa)


def vm_log_pdf(d: VonMises, theta):
    return d.kappa * np.cos(np.asarray(theta) - d.chi) - math.log(2 * math.pi) - log_i0(d.kappa)


def vm_multiply(a: VonMises, b: VonMises) -> VonMises:
    return VonMises.from_complex(a.as_complex() + b.as_complex())


def vm_extrinsic(post: VonMises, pri: VonMises) -> VonMises:
    return VonMises.from_complex(post.as_complex() - pri.as_complex())


def vm_pair_extrinsic(post: VmPair, pri: VmPair) -> VmPair:
    return VmPair(vm_extrinsic(post.vx, pri.vx), vm_extrinsic(post.vy, pri.vy))


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Gaussian message with mean and covariance"""
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-10 * max(1.0, float(np.max(np.abs(cov))))):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @classmethod
    def isotropic(cls, mean, std: float) -> "GaussianBelief":
        mean = np.asarray(mean, dtype=float)
        return cls(mean, std ** 2 * np.eye(mean.size))

    def precision(self, floor: float = 1e-300) -> np.ndarray:
        """Inverse covariance with eigenvalues floored"""
        w, v = np.linalg.eigh(self.covariance)
        w = np.maximum(w, max(floor, _EPS * float(np.max(np.abs(w)))))
        return (v / w) @ v.T

    def information(self):
        lam = self.precision()
        return lam, lam @ self.mean

    @classmethod
    def from_information(cls, precision: np.ndarray, shift: np.ndarray) -> "GaussianBelief":
        cov = np.linalg.inv(precision)
        cov = 0.5 * (cov + cov.T)
        return cls(cov @ shift, cov)

    def combine(self, other: "GaussianBelief") -> "GaussianBelief":
        """Normalized product of two Gaussians in information form"""
        lam1, eta1 = self.information()
        lam2, eta2 = other.information()
        return GaussianBelief.from_information(lam1 + lam2, eta1 + eta2)

    def is_psd(self, tol: float = 1e-10) -> bool:
        w = np.linalg.eigvalsh(self.covariance)
        return bool(np.all(w >= -tol * max(1.0, float(np.max(np.abs(w))))))


def gaussian_to_vm(belief: GaussianBelief, subarray_ref, axes: Optional[np.ndarray] = None) -> VmPair:
    """VM beliefs over pi*phi_x and pi*phi_y induced by a Gaussian antenna position"""
    axes = np.eye(3)[:, :2] if axes is None else np.asarray(axes, dtype=float)
    diff = belief.mean - np.asarray(subarray_ref, dtype=float)
    dist = float(np.linalg.norm(diff))
    if dist == 0:
        raise GeometryError("belief mean coincides with the subarray reference")
    unit = diff / dist
    out = []
    for axis in range(2):
        e = axes[:, axis]
        cosine = float(np.clip(unit @ e, -1.0, 1.0))
        perp = e - cosine * unit
        norm = float(np.linalg.norm(perp))
        if norm < 1e-9:
            # Endfire: line of sight along the axis, cosine pinned at +-1
            out.append(VonMises(np.pi * cosine, KAPPA_MAX))
            continue
        v = perp / norm
        spread = float(v @ belief.covariance @ v)
        kappa = KAPPA_MAX if spread <= 0 else dist ** 2 / (np.pi ** 2 * norm ** 2 * spread)
        out.append(VonMises(np.pi * cosine, kappa))
    return VmPair(out[0], out[1])


def numeric_gradient(func: Callable, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (func(xp) - func(xm)) / (2 * h)
    return grad


def numeric_jacobian(func: Callable, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences of a vector function; rows index the outputs"""
    x = np.asarray(x, dtype=float)
    columns = []
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        columns.append((np.asarray(func(xp)) - np.asarray(func(xm))) / (2 * h))
    return np.stack(columns, axis=-1)


def numeric_hessian(func: Callable, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    steps = rel_step * np.maximum(1.0, np.abs(x))
    f0 = func(x)
    hess = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        hess[i, i] = (func(x + ei) - 2 * f0 + func(x - ei)) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = steps[j]
            value = (func(x + ei + ej) - func(x + ei - ej)
                     - func(x - ei + ej) + func(x - ei - ej)) / (4 * steps[i] * steps[j])
            hess[i, j] = hess[j, i] = value
    return hess


def regularize_hessian(hessian: np.ndarray, cap: float = -1e-9):
    """Force eigenvalues <= cap; returns (negative-definite matrix, regularized flag)"""
    sym = 0.5 * (hessian + hessian.T)
    w, v = np.linalg.eigh(sym)
    regularized = bool(np.any(w > cap))
    w = np.minimum(w, cap)
    return (v * w) @ v.T, regularized


@dataclass(frozen=True, eq=False)
class LaplaceResult:
    belief: GaussianBelief
    value: float
    converged: bool
    regularized: bool
    iterations: int
    hessian: np.ndarray


def laplace_fit(log_density: Callable, init, options: Optional[AscentOptions] = None,
                gradient: Optional[Callable] = None,
                hessian: Optional[Callable] = None) -> LaplaceResult:
    """Mode by Newton-preconditioned gradient ascent with Armijo backtracking, covariance -H^-1.

    The ascent direction is the gradient premultiplied by the inverse of the
    regularized negative Hessian, which is positive definite.
    """
    opts = options or AscentOptions()
    x = np.atleast_1d(np.asarray(init, dtype=float)).copy()

    grad_fn = gradient or (lambda z: numeric_gradient(log_density, z, opts.fd_step))
    if hessian is not None:
        hess_fn = hessian
    elif gradient is not None:
        hess_fn = lambda z: numeric_jacobian(gradient, z, opts.fd_step)  # noqa: E731
    else:
        hess_fn = lambda z: numeric_hessian(log_density, z, max(opts.fd_step, 1e-4))  # noqa: E731

    f = float(log_density(x))
    if math.isnan(f) or f == math.inf:
        raise ConvergenceError("log density is not finite at the starting point", details=f"value {f}")
    converged = False
    steps = 0
    for _ in range(opts.max_iterations):
        g = np.asarray(grad_fn(x), dtype=float)
        if not np.all(np.isfinite(g)):
            raise ConvergenceError("ascent produced a non-finite gradient", details=f"after {steps} steps")
        if np.linalg.norm(g) < opts.gradient_tol:
            converged = True
            break
        neg_def, _ = regularize_hessian(np.asarray(hess_fn(x), dtype=float), opts.hessian_cap)
        direction = -np.linalg.solve(neg_def, g)
        decrement = float(g @ direction)
        scale = max(1.0, abs(f))
        if decrement <= 4 * _EPS * scale:
            converged = True
            break
        step = opts.initial_step
        slack = 8 * _EPS * scale
        accepted = False
        while step > 1e-16:
            candidate = x + step * direction
            value = float(log_density(candidate))
            if np.isfinite(value) and value >= f + opts.armijo * step * decrement - slack:
                accepted = True
                break
            step *= opts.backtrack_factor
        if not accepted:
            converged = decrement <= 1e-8 * scale
            break
        x, f = candidate, value
        steps += 1

    h = np.asarray(hess_fn(x), dtype=float)
    h = 0.5 * (h + h.T)
    neg_def, regularized = regularize_hessian(h, opts.hessian_cap)
    cov = -np.linalg.inv(neg_def)
    if not converged:
        logger.debug(f"Laplace fit stopped after {steps} steps without convergence")
    return LaplaceResult(GaussianBelief(x, 0.5 * (cov + cov.T)), f, converged, regularized, steps, h)
