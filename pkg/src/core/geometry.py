"""Coordinate systems, antenna layouts, rotation algebra and distance boundaries.

All public indices are 1-based: BS antenna (u, v), MS antenna (q, s).
Vectors are numpy arrays of shape (3,); batched helpers accept (..., 3).
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from ..models.schemas import SPEED_OF_LIGHT, PoseConfig, UraSpec
from .exceptions import GeometryError

PITCH_SLACK = 1e-12


def wavelength(carrier_frequency_hz: float) -> float:
    if carrier_frequency_hz <= 0:
        raise GeometryError("carrier frequency must be positive")
    return SPEED_OF_LIGHT / carrier_frequency_hz


def wrap_angle(angle):
    """Wrap to [-pi, pi)"""
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class EulerAngles:
    """Roll, pitch, yaw in radians; roll/yaw wrapped, pitch in [-pi/2, pi/2]"""
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        values = (self.roll, self.pitch, self.yaw)
        if not all(math.isfinite(v) for v in values):
            raise GeometryError("Euler angles must be finite", details=str(values))
        if abs(self.pitch) > math.pi / 2 + PITCH_SLACK:
            raise GeometryError(
                "pitch outside [-pi/2, pi/2]", details=f"pitch={self.pitch!r}"
            )
        object.__setattr__(self, "roll", float(wrap_angle(self.roll)))
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))
        object.__setattr__(self, "pitch", float(np.clip(self.pitch, -math.pi / 2, math.pi / 2)))

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])

    @classmethod
    def from_array(cls, angles: Sequence[float]) -> "EulerAngles":
        return cls(float(angles[0]), float(angles[1]), float(angles[2]))


def canonical_euler(roll: float, pitch: float, yaw: float) -> EulerAngles:
    """Equivalent triple with pitch in [-pi/2, pi/2], using (r, p, y) ~ (r+pi, pi-p, y+pi)"""
    pitch = float(wrap_angle(pitch))
    if pitch > math.pi / 2:
        pitch, roll, yaw = math.pi - pitch, roll + math.pi, yaw + math.pi
    elif pitch < -math.pi / 2:
        pitch, roll, yaw = -math.pi - pitch, roll + math.pi, yaw + math.pi
    return EulerAngles(roll, pitch, yaw)


@dataclass(frozen=True, eq=False)
class Pose:
    """MS reference position (m) and attitude"""
    position: np.ndarray
    attitude: EulerAngles = field(default_factory=EulerAngles)

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(position)):
            raise GeometryError("pose position must be finite")
        object.__setattr__(self, "position", position)

    @classmethod
    def from_config(cls, config: PoseConfig) -> "Pose":
        return cls(np.array([config.x, config.y, config.z]),
                   EulerAngles(config.roll, config.pitch, config.yaw))

    @classmethod
    def from_vector(cls, vector: Sequence[float]) -> "Pose":
        """From [x, y, z, roll, pitch, yaw]; any angle triple is canonicalized"""
        return cls(np.asarray(vector[:3], dtype=float), canonical_euler(*vector[3:6]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.attitude.as_array()])

    def to_config(self) -> PoseConfig:
        x, y, z = self.position
        return PoseConfig(x=x, y=y, z=z, roll=self.attitude.roll,
                          pitch=self.attitude.pitch, yaw=self.attitude.yaw)

    @property
    def basis(self) -> "RotationBasis":
        return rotation_basis(self.attitude)


@dataclass(frozen=True, eq=False)
class RotationBasis:
    """First two columns of Rz(yaw) Ry(pitch) Rx(roll)"""
    matrix: np.ndarray

    @property
    def ex(self) -> np.ndarray:
        return self.matrix[:, 0]

    @property
    def ey(self) -> np.ndarray:
        return self.matrix[:, 1]

    def full(self) -> np.ndarray:
        """3x3 rotation completed with ex x ey"""
        return np.column_stack([self.ex, self.ey, np.cross(self.ex, self.ey)])


def _axis_factor(axis: int, angle: float, order: int) -> np.ndarray:
    """order-th derivative of the elementary rotation about axis (0=x, 1=y, 2=z)"""
    # d^n/da^n of (cos, sin) is a phase shift by n*pi/2
    c = math.cos(angle + order * math.pi / 2)
    s = math.sin(angle + order * math.pi / 2)
    one = 1.0 if order == 0 else 0.0
    if axis == 0:
        return np.array([[one, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 1:
        return np.array([[c, 0, s], [0, one, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, one]])


def _rotation_product(angles: np.ndarray, orders: Tuple[int, int, int]) -> np.ndarray:
    rx = _axis_factor(0, angles[0], orders[0])
    ry = _axis_factor(1, angles[1], orders[1])
    rz = _axis_factor(2, angles[2], orders[2])
    return rz @ ry @ rx


def _angles(theta: Union[EulerAngles, Sequence[float]]) -> np.ndarray:
    if isinstance(theta, EulerAngles):
        return theta.as_array()
    return np.asarray(theta, dtype=float)


def rotation_matrix(theta: Union[EulerAngles, Sequence[float]]) -> np.ndarray:
    return _rotation_product(_angles(theta), (0, 0, 0))


def rotation_basis(theta: Union[EulerAngles, Sequence[float]]) -> RotationBasis:
    return RotationBasis(rotation_matrix(theta)[:, :2])


def rotation_basis_derivatives(theta: Union[EulerAngles, Sequence[float]]) -> np.ndarray:
    """(3, 2, 3) array; [..., l] is dR/dtheta_l"""
    angles = _angles(theta)
    out = np.empty((3, 2, 3))
    for axis in range(3):
        orders = [0, 0, 0]
        orders[axis] = 1
        out[:, :, axis] = _rotation_product(angles, tuple(orders))[:, :2]
    return out


def rotation_basis_second_derivatives(theta: Union[EulerAngles, Sequence[float]]) -> np.ndarray:
    """(3, 2, 3, 3) array; [..., a, b] is d2R/dtheta_a dtheta_b"""
    angles = _angles(theta)
    out = np.empty((3, 2, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            orders = [0, 0, 0]
            orders[a] += 1
            orders[b] += 1
            block = _rotation_product(angles, tuple(orders))[:, :2]
            out[:, :, a, b] = block
            out[:, :, b, a] = block
    return out


def euler_from_matrix(matrix: np.ndarray) -> EulerAngles:
    """Attitude of a proper 3x3 rotation (or its 3x2 basis)"""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape == (3, 2):
        matrix = RotationBasis(matrix).full()
    roll, pitch, yaw = Rotation.from_matrix(matrix).as_euler("xyz")
    return canonical_euler(roll, pitch, yaw)


def _check_index(value: int, upper: int, name: str):
    if not (isinstance(value, (int, np.integer)) and 1 <= value <= upper):
        raise GeometryError(f"index {name}={value!r} outside [1, {upper}]")


def bs_antenna_position(spec: UraSpec, u: int, v: int, lam: float) -> np.ndarray:
    _check_index(u, spec.nx, "u")
    _check_index(v, spec.ny, "v")
    return np.array([(u - (spec.nx + 1) / 2) * lam / 2, (v - (spec.ny + 1) / 2) * lam / 2, 0.0])


def bs_antenna_positions(spec: UraSpec, lam: float) -> np.ndarray:
    """All BS antennas as (N_B, 3), rows in vec order of the (u, v) grid (u fastest)"""
    u = (np.arange(1, spec.nx + 1) - (spec.nx + 1) / 2) * lam / 2
    v = (np.arange(1, spec.ny + 1) - (spec.ny + 1) / 2) * lam / 2
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return np.column_stack([uu.ravel(order="F"), vv.ravel(order="F"), np.zeros(spec.num_antennas)])


def ms_local_antenna_position(spec: UraSpec, q: int, s: int, lam: float) -> np.ndarray:
    _check_index(q, spec.nx, "q")
    _check_index(s, spec.ny, "s")
    return np.array([(q - (spec.nx + 1) / 2) * lam / 2, (s - (spec.ny + 1) / 2) * lam / 2])


def ms_antenna_global_position(pose: Pose, local: Sequence[float]) -> np.ndarray:
    return pose.position + pose.basis.matrix @ np.asarray(local, dtype=float)


@dataclass(frozen=True)
class TransmitPattern:
    """Ordered (q, s) MS antenna indices activated in slots t = 1..T"""
    slots: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        slots = tuple((int(q), int(s)) for q, s in self.slots)
        if not slots:
            raise GeometryError("transmit pattern must contain at least one slot")
        if len(set(slots)) != len(slots):
            raise GeometryError("transmit pattern has duplicate slots", details=str(slots))
        object.__setattr__(self, "slots", slots)

    def __len__(self) -> int:
        return len(self.slots)

    def validate(self, spec: UraSpec) -> "TransmitPattern":
        for q, s in self.slots:
            _check_index(q, spec.nx, "q")
            _check_index(s, spec.ny, "s")
        return self

    def local_positions(self, spec: UraSpec, lam: float) -> np.ndarray:
        """(T, 2) local offsets of the activated antennas"""
        self.validate(spec)
        return np.array([ms_local_antenna_position(spec, q, s, lam) for q, s in self.slots])

    def is_collinear(self, spec: UraSpec, lam: float, tol: float = 1e-12) -> bool:
        local = self.local_positions(spec, lam)
        centered = local - local.mean(axis=0)
        return len(self) < 3 or np.linalg.matrix_rank(centered, tol=tol * max(lam, 1.0)) < 2


def named_pattern(name: str, spec: UraSpec) -> TransmitPattern:
    """Corner/centre patterns T3, T5 and T9"""
    nx, ny = spec.nx, spec.ny
    name = name.upper()
    if name == "T3":
        slots = [(1, 1), (1, ny), (nx, max(1, math.ceil((ny - 1) / 2)))]
    elif name in ("T5", "T9"):
        slots = [(1, 1), (1, ny), (nx, 1), (nx, ny),
                 (math.ceil((nx + 1) / 2), math.ceil((ny + 1) / 2))]
        if name == "T9":
            c = max(1, math.ceil((ny - 1) / 2))
            r = max(1, math.ceil((nx - 1) / 2))
            slots += [(1, c), (nx, c), (r, 1), (r, ny)]
    else:
        raise GeometryError(f"unknown transmit pattern {name!r}")
    # Small arrays fold corners together
    unique = list(dict.fromkeys(slots))
    return TransmitPattern(tuple(unique)).validate(spec)


def resolve_pattern(pattern: Union[str, Iterable[Tuple[int, int]]], spec: UraSpec) -> TransmitPattern:
    if isinstance(pattern, str):
        return named_pattern(pattern, spec)
    return TransmitPattern(tuple(pattern)).validate(spec)


def activated_antenna_positions(poses: Sequence[Pose], pattern: TransmitPattern,
                                ms_spec: UraSpec, lam: float) -> np.ndarray:
    """(K, T, 3) global positions of the activated antenna of every MS in every slot"""
    local = pattern.local_positions(ms_spec, lam)
    out = np.empty((len(poses), len(pattern), 3))
    for k, pose in enumerate(poses):
        out[k] = pose.position + local @ pose.basis.matrix.T
    return out


def fresnel_distance(largest_dimension: float, lam: float) -> float:
    if largest_dimension <= 0 or lam <= 0:
        raise GeometryError("aperture and wavelength must be positive")
    return float(np.cbrt(largest_dimension ** 4 / (8 * lam)))


def rayleigh_distance(largest_dimension: float, lam: float) -> float:
    if largest_dimension <= 0 or lam <= 0:
        raise GeometryError("aperture and wavelength must be positive")
    return 2 * largest_dimension ** 2 / lam


def conservative_subarray_limit(min_distance: float, lam: float) -> float:
    """Largest subarray dimension whose Rayleigh distance does not exceed min_distance"""
    if min_distance <= 0 or lam <= 0:
        raise GeometryError("distance and wavelength must be positive")
    return math.sqrt(lam * min_distance / 2)


def aoa_cosines(target, reference) -> np.ndarray:
    """Direction cosines (phi_x, phi_y) of target seen from reference, shape (..., 2)"""
    diff = np.asarray(target, dtype=float) - np.asarray(reference, dtype=float)
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(dist == 0):
        raise GeometryError("target coincides with reference")
    return diff[..., :2] / dist


def cosine_gradients(target: np.ndarray, reference: np.ndarray):
    """Cosines, their gradients (2, 3) and Hessians (2, 3, 3) with respect to target"""
    diff = np.asarray(target, dtype=float) - np.asarray(reference, dtype=float)
    dist = float(np.linalg.norm(diff))
    if dist == 0:
        raise GeometryError("target coincides with reference")
    unit = diff / dist
    cosines = unit[:2]
    eye = np.eye(3)
    grads = (eye[:2] - cosines[:, None] * unit[None, :]) / dist
    hessians = np.empty((2, 3, 3))
    uu = np.outer(unit, unit)
    for axis in range(2):
        e = eye[axis]
        hessians[axis] = (-(np.outer(e, unit) + np.outer(unit, e))
                          + cosines[axis] * (3 * uu - eye)) / dist ** 2
    return cosines, grads, hessians


def rigid_alignment(local_points: np.ndarray, world_points: np.ndarray) -> Pose:
    """Least-squares rigid pose mapping local MS offsets onto world points (Kabsch)"""
    local = np.asarray(local_points, dtype=float)
    if local.shape[1] == 2:
        local = np.column_stack([local, np.zeros(len(local))])
    world = np.asarray(world_points, dtype=float)
    if local.shape != world.shape or len(local) < 2:
        raise GeometryError("need matching point sets with at least two points")

    local_centroid = local.mean(axis=0)
    world_centroid = world.mean(axis=0)
    h = (local - local_centroid).T @ (world - world_centroid)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    position = world_centroid - rot @ local_centroid
    return Pose(position, euler_from_matrix(rot))
