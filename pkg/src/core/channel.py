"""Exact near-field and subarray-wise far-field (SWFF) received signal generation.

Row index of every N_B x T matrix is the vec of the BS (u, v) grid (u fastest),
column index is the time slot. The SWFF steering vector of an nx x ny subarray
is a_{ij}(phi) = exp(+j*pi*(i*phi_x + j*phi_y)) with 1-based local (i, j), and
each coefficient carries the reference-offset factor exp(-j*pi*(Nx*phi_x + Ny*phi_y))
with (Nx, Ny) the reference index, so that a * coefficient reproduces the
first-order expansion r_ij = r - (lambda/2)((i-Nx)phi_x + (j-Ny)phi_y) of the link distance.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..models.schemas import ScenarioConfig
from .exceptions import GeometryError, InvalidInputError, ScenarioError
from .geometry import (
    Pose,
    activated_antenna_positions,
    bs_antenna_positions,
    fresnel_distance,
    resolve_pattern,
)
from .partition import PartitionPlan, validate_swff

logger = logging.getLogger(__name__)

SIGNAL_MAGIC = b"NFPAESIG"
HEADER_BYTES = 32


@dataclass(frozen=True, eq=False)
class ReceivedSignal:
    """Complex N_B x T samples"""
    samples: np.ndarray
    seed: int = 0

    @property
    def num_antennas(self) -> int:
        return self.samples.shape[0]

    @property
    def num_slots(self) -> int:
        return self.samples.shape[1]

    def snapshot(self, plan: PartitionPlan, m: int, t: int) -> np.ndarray:
        """Y_{m,t} as an (nx, ny) matrix; m and t 1-based"""
        sub = plan.subarray(m)
        return self.samples[sub.rows, t - 1].reshape((sub.nx, sub.ny), order="F")


@dataclass(frozen=True, eq=False)
class SwffCoefficients:
    """Per (m, k, t): complex gain, cosine pair and reference distance"""
    gains: np.ndarray      # (M, K, T) complex
    cosines: np.ndarray    # (M, K, T, 2)
    distances: np.ndarray  # (M, K, T)


def local_indices(nx: int, ny: int) -> Tuple[np.ndarray, np.ndarray]:
    """1-based local (i, j) of an nx x ny grid in vec order"""
    return np.tile(np.arange(1, nx + 1), ny), np.repeat(np.arange(1, ny + 1), nx)


def steering(nx: int, ny: int, cosines) -> np.ndarray:
    """SWFF steering vectors, shape (..., nx*ny) in vec order"""
    cosines = np.asarray(cosines, dtype=float)
    ii, jj = local_indices(nx, ny)
    phase = np.pi * (cosines[..., 0, None] * ii + cosines[..., 1, None] * jj)
    return np.exp(1j * phase)


def reference_offset(nx: int, ny: int, cosines) -> np.ndarray:
    cosines = np.asarray(cosines, dtype=float)
    ref_x, ref_y = math.ceil(nx / 2), math.ceil(ny / 2)
    return np.exp(-1j * np.pi * (ref_x * cosines[..., 0] + ref_y * cosines[..., 1]))


def nearfield_channel_coeff(bs_antenna, ms_antenna, beta: float, lam: float):
    """beta * lambda/(4 pi r) * exp(-j 2 pi r / lambda); broadcasts over leading axes"""
    diff = np.asarray(ms_antenna, dtype=float) - np.asarray(bs_antenna, dtype=float)
    r = np.linalg.norm(diff, axis=-1)
    if np.any(r == 0):
        raise GeometryError("BS and MS antennas coincide")
    out = beta * lam / (4 * np.pi * r) * np.exp(-2j * np.pi * r / lam)
    return complex(out) if np.ndim(out) == 0 else out


def _complex_normal(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    scale = math.sqrt(variance / 2)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def scenario_poses(scenario: ScenarioConfig) -> List[Pose]:
    if scenario.poses is None:
        raise ScenarioError("scenario has no poses; draw them first")
    return [Pose.from_config(p) for p in scenario.poses]


def draw_poses(scenario: ScenarioConfig, rng: np.random.Generator) -> List[Pose]:
    """Independent uniform draws of distance, azimuth, elevation and attitude per MS"""
    draw = scenario.draw
    poses = []
    for _ in range(scenario.num_ms):
        r = rng.uniform(draw.distance_min, draw.distance_max)
        azimuth = rng.uniform(draw.azimuth_min, draw.azimuth_max)
        elevation = rng.uniform(draw.elevation_min, draw.elevation_max)
        position = r * np.array([
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ])
        roll = rng.uniform(-draw.roll_max, draw.roll_max)
        pitch = rng.uniform(-draw.pitch_max, draw.pitch_max)
        yaw = rng.uniform(-draw.yaw_max, draw.yaw_max)
        poses.append(Pose.from_vector([*position, roll, pitch, yaw]))
    return poses


def with_poses(scenario: ScenarioConfig, poses: Sequence[Pose]) -> ScenarioConfig:
    return scenario.model_copy(update={"poses": [p.to_config() for p in poses]})


def antenna_positions(scenario: ScenarioConfig, poses: Optional[Sequence[Pose]] = None) -> np.ndarray:
    """(K, T, 3) positions of the activated MS antennas"""
    poses = scenario_poses(scenario) if poses is None else list(poses)
    pattern = resolve_pattern(scenario.pattern, scenario.ms)
    return activated_antenna_positions(poses, pattern, scenario.ms, scenario.wavelength)


def check_fresnel(scenario: ScenarioConfig, positions: np.ndarray):
    lam = scenario.wavelength
    size = scenario.bs.largest_dimension(lam)
    if size == 0 or scenario.allow_reactive_near_field:
        return
    limit = fresnel_distance(size, lam)
    closest = float(np.min(np.linalg.norm(positions.reshape(-1, 3), axis=1)))
    if closest < limit:
        raise ScenarioError(
            "MS antenna inside the reactive near field of the BS array",
            details=f"closest distance {closest:.4g} m < Fresnel distance {limit:.4g} m",
        )


def exact_channel(scenario: ScenarioConfig, poses: Optional[Sequence[Pose]] = None) -> np.ndarray:
    """Noiseless LoS samples sqrt(Px) * sum_k h_{k,t}, shape (N_B, T)"""
    positions = antenna_positions(scenario, poses)
    bs = bs_antenna_positions(scenario.bs, scenario.wavelength)
    gains = np.array([scenario.gain(k) for k in range(scenario.num_ms)])
    h = nearfield_channel_coeff(bs[None, None, :, :], positions[:, :, None, :],
                                gains[:, None, None], scenario.wavelength)
    return math.sqrt(scenario.tx_power_w) * h.sum(axis=0).T


def simulate_received(scenario: ScenarioConfig, rng: np.random.Generator,
                      poses: Optional[Sequence[Pose]] = None) -> ReceivedSignal:
    """Exact near-field samples plus AWGN, with optional Rician NLoS terms"""
    poses = scenario_poses(scenario) if poses is None else list(poses)
    positions = antenna_positions(scenario, poses)
    check_fresnel(scenario, positions)

    lam = scenario.wavelength
    bs = bs_antenna_positions(scenario.bs, lam)
    num_slots = positions.shape[1]

    # Noise first so it does not depend on K or the K-factor
    samples = _complex_normal(rng, (len(bs), num_slots), scenario.noise_power_w)
    amplitude = math.sqrt(scenario.tx_power_w)
    k_factor = scenario.rician_k_factor
    for k in range(len(poses)):
        for t in range(num_slots):
            h = nearfield_channel_coeff(bs, positions[k, t], scenario.gain(k), lam)
            if math.isfinite(k_factor):
                h = h + np.abs(h) / math.sqrt(k_factor) * _complex_normal(rng, h.shape, 1.0)
            samples[:, t] += amplitude * h
    return ReceivedSignal(samples, seed=scenario.seed)


def simulate_guard(scenario: ScenarioConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    """Signal-free noise samples for plug-in noise power estimation"""
    return _complex_normal(rng, (scenario.bs.num_antennas, count), scenario.noise_power_w)


def swff_coefficients(scenario: ScenarioConfig, plan: PartitionPlan,
                      poses: Optional[Sequence[Pose]] = None, enforce: bool = False) -> SwffCoefficients:
    positions = antenna_positions(scenario, poses)
    lam = scenario.wavelength
    report = validate_swff(plan, positions, lam)
    if not report.passed:
        if enforce:
            raise ScenarioError("subarray-wise far-field assumption violated",
                                details=f"margin {report.margin:.4g} m at subarray {report.worst_subarray}")
        logger.warning(f"SWFF assumption violated (margin {report.margin:.4g} m)")

    refs = plan.ref_positions()
    diff = positions[None, :, :, :] - refs[:, None, None, :]
    distances = np.linalg.norm(diff, axis=-1)
    cosines = diff[..., :2] / distances[..., None]
    gains = np.array([scenario.gain(k) for k in range(positions.shape[0])])
    coefficient = (math.sqrt(scenario.tx_power_w) * gains[None, :, None]
                   * lam / (4 * np.pi * distances) * np.exp(-2j * np.pi * distances / lam))
    offsets = np.stack([reference_offset(s.nx, s.ny, cosines[m])
                        for m, s in enumerate(plan.subarrays)])
    return SwffCoefficients(coefficient * offsets, cosines, distances)


def swff_channel(coeffs: SwffCoefficients, plan: PartitionPlan) -> np.ndarray:
    """Noiseless SWFF samples, shape (N_B, T)"""
    num_slots = coeffs.gains.shape[2]
    out = np.zeros((plan.bs.num_antennas, num_slots), dtype=complex)
    for m, sub in enumerate(plan.subarrays):
        a = steering(sub.nx, sub.ny, coeffs.cosines[m])  # (K, T, N_m)
        out[sub.rows, :] = np.einsum("kt,ktn->nt", coeffs.gains[m], a)
    return out


def swff_received(coeffs: SwffCoefficients, plan: PartitionPlan, noise_power: float,
                  rng: np.random.Generator) -> ReceivedSignal:
    noiseless = swff_channel(coeffs, plan)
    noise = _complex_normal(rng, noiseless.shape, noise_power)
    return ReceivedSignal(noise + noiseless)


def dump_signal(path: Path, signal: ReceivedSignal):
    """Little-endian header (magic, N_B, T, seed) then interleaved float64 re/im, row-major"""
    samples = np.ascontiguousarray(signal.samples, dtype="<c16")
    header = SIGNAL_MAGIC + np.array([signal.num_antennas, signal.num_slots, signal.seed],
                                     dtype="<u8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(samples.view("<f8").tobytes())


def load_signal(path: Path) -> ReceivedSignal:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_BYTES or raw[:8] != SIGNAL_MAGIC:
        raise InvalidInputError(f"{path} is not a signal dump")
    num_antennas, num_slots, seed = np.frombuffer(raw[8:HEADER_BYTES], dtype="<u8")
    body = np.frombuffer(raw[HEADER_BYTES:], dtype="<f8")
    if body.size != 2 * num_antennas * num_slots:
        raise InvalidInputError(f"{path} is truncated",
                                details=f"expected {2 * num_antennas * num_slots} floats, got {body.size}")
    samples = body.view("<c16").reshape(int(num_antennas), int(num_slots)).astype(complex)
    return ReceivedSignal(samples, seed=int(seed))
