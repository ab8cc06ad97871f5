"""Misspecified Cramer-Rao lower bound of the SWFF model against the exact near-field model.

Parameter order: gamma = [p_1..p_K, theta_1..theta_K] followed, in gamma_FF, by
(re, im) of every SWFF coefficient rho_{m,k,t} in (m, k, t) order. Mean vectors
stack vec(Omega_t) for t = 1..T.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from ..models.schemas import McrbOptions, ScenarioConfig
from .channel import nearfield_channel_coeff, scenario_poses, steering, swff_coefficients
from .circular import numeric_hessian
from .exceptions import ConditioningError, InvalidInputError, numerical_boundary
from .geometry import Pose, bs_antenna_positions, resolve_pattern, rotation_basis, rotation_basis_derivatives
from .partition import PartitionPlan

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """gamma (6K reals) plus the complex SWFF coefficients rho (M, K, T)"""
    gamma: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float).ravel()
        rho = np.asarray(self.rho, dtype=complex)
        if rho.ndim != 3 or gamma.size != 6 * rho.shape[1]:
            raise InvalidInputError(
                "parameter lengths do not match",
                details=f"gamma has {gamma.size} entries, rho shape {rho.shape}",
            )
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "rho", rho)

    @property
    def num_ms(self) -> int:
        return self.rho.shape[1]

    @property
    def gamma_ff(self) -> np.ndarray:
        flat = self.rho.ravel()
        return np.concatenate([self.gamma, np.column_stack([flat.real, flat.imag]).ravel()])

    @classmethod
    def from_gamma_ff(cls, vector: np.ndarray, rho_shape: Tuple[int, int, int]) -> "ParamVector":
        vector = np.asarray(vector, dtype=float)
        split = 6 * rho_shape[1]
        pairs = vector[split:].reshape(-1, 2)
        return cls(vector[:split], (pairs[:, 0] + 1j * pairs[:, 1]).reshape(rho_shape))

    def pose(self, k: int) -> Pose:
        K = self.num_ms
        return Pose.from_vector(np.concatenate([self.gamma[3 * k:3 * k + 3],
                                                self.gamma[3 * K + 3 * k:3 * K + 3 * k + 3]]))


def pose_vector(poses: Sequence[Pose]) -> np.ndarray:
    """gamma for a list of poses"""
    return np.concatenate([np.concatenate([p.position for p in poses]),
                           np.concatenate([p.attitude.as_array() for p in poses])])


@dataclass(frozen=True, eq=False)
class PseudotrueFit:
    params: ParamVector
    residual: float
    converged: bool


@dataclass(eq=False)
class McrbResult:
    lb: np.ndarray
    pseudotrue: ParamVector
    bias: np.ndarray
    position_bounds: np.ndarray
    attitude_bounds: np.ndarray
    rotation_nmse_bounds: np.ndarray
    residual: float = 0.0
    flags: Counter = field(default_factory=Counter)

    @property
    def bias_norm(self) -> Tuple[float, float]:
        """Pseudotrue bias norms (position m, attitude rad)"""
        K = len(self.position_bounds)
        return float(np.linalg.norm(self.bias[:3 * K])), float(np.linalg.norm(self.bias[3 * K:]))


class SwffModel:
    """Exact and SWFF mean vectors of one scenario as functions of gamma"""

    def __init__(self, scenario: ScenarioConfig, plan: PartitionPlan):
        self.scenario = scenario
        self.plan = plan
        self.num_ms = scenario.num_ms
        self.local = resolve_pattern(scenario.pattern, scenario.ms).local_positions(scenario.ms, scenario.wavelength)
        self.refs = plan.ref_positions()
        self.bs = bs_antenna_positions(scenario.bs, scenario.wavelength)
        self.gains = np.array([scenario.gain(k) for k in range(self.num_ms)])

    @property
    def num_slots(self) -> int:
        return len(self.local)

    @property
    def num_antennas(self) -> int:
        return len(self.bs)

    @property
    def rho_shape(self) -> Tuple[int, int, int]:
        return (self.plan.num_subarrays, self.num_ms, self.num_slots)

    def antenna_positions(self, gamma: np.ndarray) -> np.ndarray:
        K = self.num_ms
        positions = gamma[:3 * K].reshape(K, 3)
        angles = gamma[3 * K:].reshape(K, 3)
        return np.stack([positions[k] + self.local @ rotation_basis(angles[k]).matrix.T for k in range(K)])

    def steering(self, gamma: np.ndarray) -> List[np.ndarray]:
        """Per subarray (K, T, N_m) steering vectors at the pose-induced cosines"""
        diff = self.antenna_positions(gamma)[None] - self.refs[:, None, None, :]
        cosines = diff[..., :2] / np.linalg.norm(diff, axis=-1, keepdims=True)
        return [steering(sub.nx, sub.ny, cosines[m]) for m, sub in enumerate(self.plan.subarrays)]

    def steering_derivatives(self, gamma: np.ndarray, rel_step: float) -> List[np.ndarray]:
        """Per subarray (6K, K, T, N_m) central differences in the pose entries"""
        out = [np.empty((gamma.size, *s.shape), dtype=complex) for s in self.steering(gamma)]
        for a in range(gamma.size):
            h = rel_step * max(1.0, abs(gamma[a]))
            up, down = gamma.copy(), gamma.copy()
            up[a] += h
            down[a] -= h
            for m, (sp, sm) in enumerate(zip(self.steering(up), self.steering(down))):
                out[m][a] = (sp - sm) / (2 * h)
        return out

    def assemble(self, rho: np.ndarray, blocks: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros((self.num_antennas, self.num_slots), dtype=complex)
        for m, sub in enumerate(self.plan.subarrays):
            out[sub.rows, :] = np.einsum("kt,ktn->nt", rho[m], blocks[m])
        return out.ravel(order="F")

    def mu_ff(self, gamma: np.ndarray, rho: np.ndarray) -> np.ndarray:
        return self.assemble(rho, self.steering(gamma))

    def mu(self, gamma: np.ndarray) -> np.ndarray:
        """Noiseless exact near-field mean"""
        positions = self.antenna_positions(gamma)
        h = nearfield_channel_coeff(self.bs[None, None], positions[:, :, None, :],
                                    self.gains[:, None, None], self.scenario.wavelength)
        return math.sqrt(self.scenario.tx_power_w) * h.sum(axis=0).ravel()

    def slot_rows(self, m: int, t: int) -> np.ndarray:
        return t * self.num_antennas + self.plan.subarrays[m].rows

    def solve_coefficients(self, gamma: np.ndarray, target: np.ndarray):
        """Per-(m, t) least-squares rho given gamma; returns (rho, squared residual)"""
        rho = np.zeros(self.rho_shape, dtype=complex)
        blocks = self.steering(gamma)
        residual = 0.0
        for m in range(self.plan.num_subarrays):
            for t in range(self.num_slots):
                design = blocks[m][:, t, :].T
                y = target[self.slot_rows(m, t)]
                solution, *_ = np.linalg.lstsq(design, y, rcond=None)
                rho[m, :, t] = solution
                residual += float(np.sum(np.abs(y - design @ solution) ** 2))
        return rho, residual


def mu_ff(params: ParamVector, scenario: ScenarioConfig, plan: PartitionPlan) -> np.ndarray:
    return SwffModel(scenario, plan).mu_ff(params.gamma, params.rho)


def truth_parameters(scenario: ScenarioConfig, plan: PartitionPlan,
                     poses: Optional[Sequence[Pose]] = None) -> ParamVector:
    """True gamma with the SWFF coefficients of the true geometry"""
    poses = scenario_poses(scenario) if poses is None else list(poses)
    coeffs = swff_coefficients(scenario, plan, poses)
    return ParamVector(pose_vector(poses), coeffs.gains)


def _grid_refine(objective, x0: np.ndarray, options: McrbOptions) -> np.ndarray:
    """Coordinate-wise grid refinement with a shrinking span"""
    x = x0.copy()
    best = objective(x)
    span = options.grid_span
    for _ in range(options.grid_rounds):
        for i in range(x.size):
            for offset in np.linspace(-span, span, options.grid_points):
                candidate = x.copy()
                candidate[i] += offset
                value = objective(candidate)
                if value < best:
                    best, x = value, candidate
        span *= 2.0 / (options.grid_points - 1)
    return x


def pseudotrue_fit(truth: ParamVector, scenario: ScenarioConfig, plan: PartitionPlan,
                   options: Optional[McrbOptions] = None,
                   truth_signal: Optional[np.ndarray] = None) -> PseudotrueFit:
    """Minimize the normalized squared residual between exact and SWFF means"""
    opts = options or McrbOptions()
    model = SwffModel(scenario, plan)
    target = model.mu(truth.gamma) if truth_signal is None else np.asarray(truth_signal)
    scale = max(float(np.sum(np.abs(target) ** 2)), 1e-300)

    def objective(gamma):
        return model.solve_coefficients(np.asarray(gamma, dtype=float), target)[1] / scale

    start = truth.gamma
    converged = True
    if opts.pseudotrue_method == "grid":
        gamma = _grid_refine(objective, start, opts)
    else:
        result = minimize(objective, start, method="BFGS", jac="3-point",
                          options={"gtol": opts.gradient_tol, "maxiter": opts.max_iterations})
        gamma = result.x
        # status 2 is precision loss at the floor of the objective
        converged = bool(result.success or result.status == 2)
        if not np.all(np.isfinite(gamma)) or result.fun > objective(start):
            logger.debug("Quasi-Newton pseudotrue search regressed; refining on a grid")
            gamma = _grid_refine(objective, start, opts)
    rho, residual = model.solve_coefficients(gamma, target)
    return PseudotrueFit(ParamVector(gamma, rho), residual / scale, converged)


def information_matrices(pseudotrue: ParamVector, truth: ParamVector, scenario: ScenarioConfig,
                         plan: PartitionPlan, noise_power: Optional[float] = None,
                         options: Optional[McrbOptions] = None,
                         truth_signal: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized Fisher matrices A and B at the pseudotrue point"""
    opts = options or McrbOptions()
    sigma2 = scenario.noise_power_w if noise_power is None else noise_power
    if sigma2 <= 0:
        raise InvalidInputError("noise power must be positive")
    model = SwffModel(scenario, plan)
    gamma, rho = pseudotrue.gamma, pseudotrue.rho
    target = model.mu(truth.gamma) if truth_signal is None else np.asarray(truth_signal)
    eps = target - model.mu_ff(gamma, rho)

    num_pose = gamma.size
    size = num_pose + 2 * rho.size
    jac = np.zeros((eps.size, size), dtype=complex)
    second = np.zeros((size, size))

    blocks = model.steering(gamma)
    derivatives = model.steering_derivatives(gamma, opts.pose_step)
    for m in range(plan.num_subarrays):
        for k in range(model.num_ms):
            for t in range(model.num_slots):
                rows = model.slot_rows(m, t)
                col = num_pose + 2 * int(np.ravel_multi_index((m, k, t), rho.shape))
                jac[rows, :num_pose] += rho[m, k, t] * derivatives[m][:, k, t, :].T
                jac[rows, col] = blocks[m][k, t]
                jac[rows, col + 1] = 1j * blocks[m][k, t]
                # eps^H d(a)/d gamma
                cross = derivatives[m][:, k, t, :] @ np.conj(eps[rows])
                second[:num_pose, col] = second[col, :num_pose] = cross.real
                second[:num_pose, col + 1] = second[col + 1, :num_pose] = -cross.imag

    second[:num_pose, :num_pose] = numeric_hessian(
        lambda g: float(np.real(np.vdot(eps, model.mu_ff(g, rho)))), gamma, opts.second_step)

    gram = np.real(jac.conj().T @ jac)
    score = np.real(eps.conj() @ jac)
    a_mat = (2.0 / sigma2) * (second - gram)
    b_mat = (4.0 / sigma2 ** 2) * np.outer(score, score) + (2.0 / sigma2) * gram
    return 0.5 * (a_mat + a_mat.T), 0.5 * (b_mat + b_mat.T)


def _inverse(a_mat: np.ndarray, limit: float, flags: Counter) -> np.ndarray:
    """Jacobi-equilibrated inverse; pseudo-inverse above the condition limit"""
    if not np.all(np.isfinite(a_mat)):
        raise ConditioningError("A matrix has non-finite entries",
                                details=f"{int(np.sum(~np.isfinite(a_mat)))} of {a_mat.size} entries")
    d = 1.0 / np.sqrt(np.maximum(np.abs(np.diag(a_mat)), 1e-300))
    scaled = d[:, None] * a_mat * d[None, :]
    try:
        cond = np.linalg.cond(scaled)
        if not np.isfinite(cond) or cond > limit:
            flags["ill_conditioned"] += 1
            logger.warning(f"A matrix condition number {cond:.3g} above {limit:.1g}; using pseudo-inverse")
            inv = np.linalg.pinv(scaled, rcond=1.0 / limit)
        else:
            inv = np.linalg.inv(scaled)
    except np.linalg.LinAlgError as e:
        raise ConditioningError("A matrix could not be inverted", details=str(e)) from e
    return d[:, None] * inv * d[None, :]


def rotation_nmse_bound(theta: np.ndarray, attitude_block: np.ndarray) -> float:
    """Delta-method bound on E||R_hat - R||_F^2 / ||R||_F^2"""
    jac = rotation_basis_derivatives(theta).transpose(1, 0, 2).reshape(6, 3)
    return float(np.trace(jac @ attitude_block @ jac.T)) / 2.0


def lower_bound(a_mat: np.ndarray, b_mat: np.ndarray, pseudotrue: ParamVector, truth: ParamVector,
                options: Optional[McrbOptions] = None, flags: Optional[Counter] = None) -> McrbResult:
    opts = options or McrbOptions()
    flags = Counter() if flags is None else flags
    inv = _inverse(a_mat, opts.condition_limit, flags)
    core = inv @ b_mat @ inv
    bias_full = pseudotrue.gamma_ff - truth.gamma_ff
    full = core + np.outer(bias_full, bias_full)
    num_pose = truth.gamma.size
    lb = full[:num_pose, :num_pose]
    lb = 0.5 * (lb + lb.T)

    K = truth.num_ms
    position = np.empty(K)
    attitude = np.empty(K)
    rotation = np.empty(K)
    for k in range(K):
        p = slice(3 * k, 3 * k + 3)
        a = slice(3 * K + 3 * k, 3 * K + 3 * k + 3)
        position[k] = math.sqrt(max(float(np.trace(lb[p, p])), 0.0))
        attitude[k] = math.sqrt(max(float(np.trace(lb[a, a])), 0.0))
        rotation[k] = rotation_nmse_bound(truth.gamma[a], lb[a, a])
    return McrbResult(lb, pseudotrue, bias_full[:num_pose], position, attitude, rotation, flags=flags)


@numerical_boundary("misspecified CRB")
def compute_bound(scenario: ScenarioConfig, plan: PartitionPlan, poses: Optional[Sequence[Pose]] = None,
                  options: Optional[McrbOptions] = None, noise_power: Optional[float] = None) -> McrbResult:
    """Pseudotrue fit, information matrices and bound for one scene"""
    opts = options or McrbOptions()
    truth = truth_parameters(scenario, plan, poses)
    fit = pseudotrue_fit(truth, scenario, plan, opts)
    flags = Counter()
    if not fit.converged:
        flags["pseudotrue_nonconverged"] += 1
        logger.warning(f"Pseudotrue search did not converge (residual {fit.residual:.3g})")
    a_mat, b_mat = information_matrices(fit.params, truth, scenario, plan, noise_power, opts)
    result = lower_bound(a_mat, b_mat, fit.params, truth, opts, flags)
    result.residual = fit.residual
    bias_p, bias_a = result.bias_norm
    logger.debug(f"MCRB position bounds {result.position_bounds}, residual {fit.residual:.3g}, "
                 f"pseudotrue bias {bias_p:.3g} m / {bias_a:.3g} rad")
    return result
