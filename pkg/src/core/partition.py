"""BS array partitioning into rectangular subarrays and the SWFF validity check"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ..models.schemas import UraSpec
from .exceptions import GeometryError, PartitionError
from .geometry import bs_antenna_position, rayleigh_distance

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SubarrayDescriptor:
    """One rectangular subarray; indices 1-based"""
    m: int
    origin: Tuple[int, int]
    nx: int
    ny: int
    ref_index: Tuple[int, int]
    ref_position: np.ndarray
    largest_dimension: float
    rayleigh_distance: float
    rows: np.ndarray  # global row of each local antenna, local vec order (i fastest)

    @property
    def num_antennas(self) -> int:
        return self.nx * self.ny

    @property
    def ref_global_index(self) -> Tuple[int, int]:
        return (self.origin[0] + self.ref_index[0] - 1, self.origin[1] + self.ref_index[1] - 1)


def _describe(m: int, bs: UraSpec, origin: Tuple[int, int], nx: int, ny: int,
              lam: float) -> SubarrayDescriptor:
    ref_index = (math.ceil(nx / 2), math.ceil(ny / 2))
    u0, v0 = origin
    size = math.hypot((nx - 1) * lam / 2, (ny - 1) * lam / 2)
    d_r = rayleigh_distance(size, lam) if size > 0 else 0.0
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    rows = ((u0 - 1 + ii) + (v0 - 1 + jj) * bs.nx).ravel(order="F")
    ref_position = bs_antenna_position(bs, u0 + ref_index[0] - 1, v0 + ref_index[1] - 1, lam)
    return SubarrayDescriptor(m, origin, nx, ny, ref_index, ref_position, size, d_r, rows)


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    """Tiling of the BS grid with the bijection (u, v) <-> (m, i, j)"""
    bs: UraSpec
    wavelength: float
    subarrays: Tuple[SubarrayDescriptor, ...]
    lookup: np.ndarray  # (nx, ny, 3) holding 1-based (m, i, j)

    @classmethod
    def from_rectangles(cls, bs: UraSpec, lam: float,
                        rectangles: Sequence[Tuple[Tuple[int, int], int, int]]) -> "PartitionPlan":
        """Build from (origin, nx, ny) rectangles; numbering is row-major by origin"""
        ordered = sorted(rectangles, key=lambda rect: (rect[0][0], rect[0][1]))
        lookup = np.zeros((bs.nx, bs.ny, 3), dtype=int)
        subarrays = []
        for m, ((u0, v0), nx, ny) in enumerate(ordered, start=1):
            if nx < 1 or ny < 1 or u0 < 1 or v0 < 1 or u0 + nx - 1 > bs.nx or v0 + ny - 1 > bs.ny:
                raise PartitionError(f"subarray {m} leaves the BS grid",
                                     details=f"origin=({u0}, {v0}) size={nx}x{ny}")
            block = lookup[u0 - 1:u0 - 1 + nx, v0 - 1:v0 - 1 + ny]
            if np.any(block[..., 0]):
                raise PartitionError(f"subarray {m} overlaps another subarray")
            ii, jj = np.meshgrid(np.arange(1, nx + 1), np.arange(1, ny + 1), indexing="ij")
            block[..., 0] = m
            block[..., 1] = ii
            block[..., 2] = jj
            subarrays.append(_describe(m, bs, (u0, v0), nx, ny, lam))
        uncovered = int(np.sum(lookup[..., 0] == 0))
        if uncovered:
            raise PartitionError("subarrays do not tile the BS grid",
                                 details=f"{uncovered} antennas uncovered")
        return cls(bs, lam, tuple(subarrays), lookup)

    @property
    def num_subarrays(self) -> int:
        return len(self.subarrays)

    @property
    def is_uniform(self) -> bool:
        shapes = {(s.nx, s.ny) for s in self.subarrays}
        return len(shapes) == 1

    def ref_positions(self) -> np.ndarray:
        """(M, 3) reference antenna positions"""
        return np.stack([s.ref_position for s in self.subarrays])

    def subarray(self, m: int) -> SubarrayDescriptor:
        if not 1 <= m <= self.num_subarrays:
            raise GeometryError(f"subarray index {m} outside [1, {self.num_subarrays}]")
        return self.subarrays[m - 1]

    def index_map(self, u: int, v: int) -> Tuple[int, int, int]:
        if not (1 <= u <= self.bs.nx and 1 <= v <= self.bs.ny):
            raise GeometryError(f"BS index ({u}, {v}) outside the grid")
        m, i, j = self.lookup[u - 1, v - 1]
        return int(m), int(i), int(j)

    def inverse(self, m: int, i: int, j: int) -> Tuple[int, int]:
        sub = self.subarray(m)
        if not (1 <= i <= sub.nx and 1 <= j <= sub.ny):
            raise GeometryError(f"local index ({i}, {j}) outside subarray {m}")
        return sub.origin[0] + i - 1, sub.origin[1] + j - 1

    def nearest_to_center(self) -> int:
        """Subarray whose reference antenna is closest to the array centre"""
        return int(np.argmin(np.linalg.norm(self.ref_positions(), axis=1))) + 1


def uniform_partition(spec: UraSpec, mx: int, my: int, lam: float) -> PartitionPlan:
    if mx < 1 or my < 1:
        raise PartitionError("partition counts must be positive")
    rx, ry = spec.nx % mx, spec.ny % my
    if rx or ry:
        raise PartitionError(
            f"{spec.nx}x{spec.ny} grid is not divisible into {mx}x{my} subarrays",
            details=f"remainder nx % mx = {rx}, ny % my = {ry}",
        )
    sx, sy = spec.nx // mx, spec.ny // my
    rectangles = [((bu * sx + 1, bv * sy + 1), sx, sy) for bu in range(mx) for bv in range(my)]
    plan = PartitionPlan.from_rectangles(spec, lam, rectangles)
    logger.debug(f"Partitioned {spec.nx}x{spec.ny} BS array into {mx * my} subarrays of {sx}x{sy}")
    return plan


@dataclass(frozen=True)
class SwffReport:
    """Outcome of the subarray-wise far-field check"""
    passed: bool
    margin: float
    worst_subarray: Optional[int] = None
    worst_antenna: Optional[int] = None


def validate_swff(plan: PartitionPlan, ms_antenna_positions, lam: float) -> SwffReport:
    """Check every antenna lies beyond every subarray's Rayleigh distance"""
    positions = np.asarray(ms_antenna_positions, dtype=float).reshape(-1, 3)
    if len(positions) == 0:
        return SwffReport(passed=True, margin=math.inf)
    refs = plan.ref_positions()
    limits = np.array([
        rayleigh_distance(s.largest_dimension, lam) if s.largest_dimension > 0 else 0.0
        for s in plan.subarrays
    ])
    distances = np.linalg.norm(positions[None, :, :] - refs[:, None, :], axis=2)
    margins = distances - limits[:, None]
    m, n = np.unravel_index(int(np.argmin(margins)), margins.shape)
    worst = float(margins[m, n])
    passed = worst > 0
    if not passed:
        logger.debug(f"SWFF violated at subarray {m + 1}, antenna {n}: margin {worst:.4g} m")
    return SwffReport(passed=passed, margin=worst,
                      worst_subarray=int(m) + 1, worst_antenna=int(n))
