"""Far-field two-stage benchmark: whole-array AoA per slot, then pose by least squares"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import least_squares

from ..models.schemas import BaselineOptions, ScenarioConfig, UraSpec
from .aoa import NOISE_FLOOR, ProfiledObjective, wrap_cosine
from .apple import PoseEstimate, associate_components
from .channel import ReceivedSignal
from .circular import VmPair, laplace_fit
from .exceptions import InvalidInputError, numerical_boundary
from .geometry import TransmitPattern, resolve_pattern, rigid_alignment, rotation_basis

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FarFieldAoaEstimate:
    cosines: np.ndarray
    power: float
    residual_power: float
    flagged: bool = False


@dataclass(eq=False)
class BaselineResult:
    estimates: List[PoseEstimate]
    aoas: np.ndarray  # (K, T, 2)
    flags: Counter = field(default_factory=Counter)


def grid_size(resolution: float, minimum: int) -> int:
    return max(minimum, 2 ** math.ceil(math.log2(2.0 / resolution)))


def farfield_aoa(column: np.ndarray, bs: UraSpec, count: int, noise_power: float,
                 options: Optional[BaselineOptions] = None) -> List[FarFieldAoaEstimate]:
    """The `count` strongest periodogram peaks of one whole-array snapshot, refined"""
    opts = options or BaselineOptions()
    y = np.asarray(column, dtype=complex).ravel()
    if y.size != bs.num_antennas:
        raise InvalidInputError(f"snapshot has {y.size} samples for a {bs.nx}x{bs.ny} array")
    noise = max(noise_power, NOISE_FLOOR)
    n = bs.num_antennas
    lx, ly = grid_size(opts.search_resolution, bs.nx), grid_size(opts.search_resolution, bs.ny)

    spectrum = np.abs(np.fft.fft2(y.reshape((bs.nx, bs.ny), order="F"), s=(lx, ly))) ** 2 / n
    phi_x = wrap_cosine(2 * np.arange(lx) / lx)
    phi_y = wrap_cosine(2 * np.arange(ly) / ly)
    visible = phi_x[:, None] ** 2 + phi_y[None, :] ** 2 <= 1.0
    peaks = (maximum_filter(spectrum, size=3, mode="wrap") == spectrum) & visible & (spectrum > 0)
    px, py = np.nonzero(peaks)
    order = np.argsort(-spectrum[px, py], kind="stable")[:count]

    objective = ProfiledObjective(y, bs.nx, bs.ny, noise, float(n), VmPair.uniform())
    total = float(np.sum(np.abs(y) ** 2)) / n
    out = []
    for idx in order:
        start = np.array([phi_x[px[idx]], phi_y[py[idx]]])
        fit = laplace_fit(objective.value, start, gradient=objective.gradient, hessian=objective.hessian)
        phi = wrap_cosine(fit.belief.mean)
        if phi @ phi > 1.0:
            phi = start
        # periodogram height n|rho|^2 of y = rho a(phi); power is |rho|^2 per antenna
        periodogram = abs(objective.matched(phi)) ** 2 / n
        power = periodogram / n
        snr = periodogram / noise
        out.append(FarFieldAoaEstimate(phi, power, max(total - power, 0.0),
                                       flagged=snr < opts.detection_snr))
    while len(out) < count:
        out.append(FarFieldAoaEstimate(np.zeros(2), 0.0, total, flagged=True))
    return out


def _cosine_model(x: np.ndarray, local: np.ndarray) -> np.ndarray:
    points = x[:3] + local @ rotation_basis(x[3:6]).matrix.T
    return points[:, :2] / np.linalg.norm(points, axis=1, keepdims=True)


def _directions(cosines: np.ndarray) -> np.ndarray:
    z = np.sqrt(np.clip(1.0 - np.sum(cosines ** 2, axis=1), 0.0, None))
    d = np.column_stack([cosines, z])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def pose_from_aoas(cosines: np.ndarray, pattern: TransmitPattern, ms: UraSpec, lam: float,
                   range_prior: float, attitude_starts: int = 8):
    """Least-squares pose from direction cosines seen at the array centre.

    Returns (PoseEstimate, flagged); flagged marks an unobservable pattern.
    """
    cosines = np.asarray(cosines, dtype=float)
    local = pattern.local_positions(ms, lam)
    if cosines.shape != (len(local), 2):
        raise InvalidInputError(f"need {len(local)} cosine pairs, got {cosines.shape}")
    flagged = pattern.is_collinear(ms, lam)

    directions = _directions(cosines)
    mean_dir = directions.mean(axis=0)
    position0 = range_prior * mean_dir / np.linalg.norm(mean_dir)

    def residuals(x):
        return (_cosine_model(x, local) - cosines).ravel()

    best = None
    for roll in (0.0, math.pi):
        for yaw in np.linspace(-math.pi, math.pi, attitude_starts, endpoint=False):
            x0 = np.concatenate([position0, [roll, 0.0, yaw]])
            fit = least_squares(residuals, x0, method="trf", x_scale="jac")
            if best is None or fit.cost < best.cost:
                best = fit

    # Procrustes on antenna points rebuilt from the fitted ranges
    x = best.x
    ranges = np.linalg.norm(x[:3] + local @ rotation_basis(x[3:6]).matrix.T, axis=1)
    aligned = rigid_alignment(local, directions * ranges[:, None]).to_vector()
    if 0.5 * float(np.sum(residuals(aligned) ** 2)) <= best.cost:
        x = aligned

    jac = best.jac
    dof = max(jac.shape[0] - jac.shape[1], 1)
    cov = np.linalg.pinv(jac.T @ jac) * (2 * best.cost / dof)
    return PoseEstimate.from_vector(x, 0.5 * (cov + cov.T), flagged), flagged


@numerical_boundary("far-field baseline")
def run_baseline(signal: ReceivedSignal, scenario: ScenarioConfig,
                 options: Optional[BaselineOptions] = None,
                 noise_power: Optional[float] = None) -> BaselineResult:
    opts = options or BaselineOptions()
    noise = scenario.noise_power_w if noise_power is None else noise_power
    pattern = resolve_pattern(scenario.pattern, scenario.ms)
    num_ms, num_slots = scenario.num_ms, len(pattern)
    if signal.num_slots != num_slots:
        raise InvalidInputError(f"signal has {signal.num_slots} slots, pattern has {num_slots}")
    flags = Counter()

    cosines = np.zeros((1, num_slots, num_ms, 2))
    powers = np.zeros((1, num_slots, num_ms))
    for t in range(num_slots):
        for k, est in enumerate(farfield_aoa(signal.samples[:, t], scenario.bs, num_ms, noise, opts)):
            cosines[0, t, k] = est.cosines
            powers[0, t, k] = est.power
            if est.flagged:
                flags["low_power_peak"] += 1

    perm = associate_components(cosines, powers, anchor=0)[0]  # (T, K)
    aoas = np.stack([cosines[0, t, perm[t]] for t in range(num_slots)], axis=1)  # (K, T, 2)

    range_prior = opts.range_prior or scenario.draw.mid_distance
    estimates = []
    for k in range(num_ms):
        estimate, unobservable = pose_from_aoas(aoas[k], pattern, scenario.ms, scenario.wavelength,
                                                range_prior, opts.attitude_starts)
        if unobservable:
            flags["unobservable_pattern"] += 1
        estimates.append(estimate)
    logger.debug(f"Baseline finished with flags {dict(flags)}")
    return BaselineResult(estimates, aoas, flags)
