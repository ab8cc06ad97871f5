"""APPLE message passing: subarray AoA estimation <-> antenna/pose information fusion.

Indices inside this module are 0-based: m subarray, k mobile station, t slot.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..config.settings import settings
from ..models.schemas import AppleConfig, AttitudePrior, ScenarioConfig
from .aoa import SourcePrior, SubarraySnapshot, estimate_aoa_posteriors, extrinsic_from_posterior
from .channel import ReceivedSignal
from .circular import GaussianBelief, gaussian_to_vm, laplace_fit
from .exceptions import InvalidInputError, numerical_boundary
from .geometry import (
    EulerAngles,
    Pose,
    RotationBasis,
    canonical_euler,
    resolve_pattern,
    rigid_alignment,
    rotation_basis,
    rotation_basis_derivatives,
    rotation_basis_second_derivatives,
)
from .partition import PartitionPlan

logger = logging.getLogger(__name__)

INITIAL_MEAN = np.array([0.0, 0.0, 1.0])
INFORMATIVE_KAPPA = 1e-6


@dataclass(eq=False)
class PoseEstimate:
    """Estimated MS pose with its 6x6 Laplace covariance"""
    position: np.ndarray
    attitude: EulerAngles
    basis: RotationBasis
    covariance: np.ndarray
    flagged: bool = False

    def to_pose(self) -> Pose:
        return Pose(self.position, self.attitude)

    @classmethod
    def from_vector(cls, vector: np.ndarray, covariance: np.ndarray, flagged: bool = False) -> "PoseEstimate":
        attitude = canonical_euler(*vector[3:6])
        return cls(np.asarray(vector[:3], dtype=float), attitude, rotation_basis(attitude), covariance, flagged)


@dataclass(eq=False)
class MessageState:
    """All Gaussian and von-Mises messages of one APPLE run"""
    to_aoa_mean: np.ndarray      # (M, K, T, 3)
    to_aoa_cov: np.ndarray       # (M, K, T, 3, 3)
    ext_chi: np.ndarray          # (M, K, T, 2)
    ext_kappa: np.ndarray        # (M, K, T, 2)
    coefficients: np.ndarray     # (M, K, T)
    fused_mean: np.ndarray       # (K, T, 3)
    fused_cov: np.ndarray        # (K, T, 3, 3)
    position_mean: np.ndarray    # (K, T, 3)
    position_cov: np.ndarray     # (K, T, 3, 3)
    attitude_mean: np.ndarray    # (K, T, 3)
    attitude_cov: np.ndarray     # (K, T, 3, 3)
    feedback_mean: np.ndarray    # (K, T, 3)
    feedback_cov: np.ndarray     # (K, T, 3, 3)
    iteration: int = 0
    flags: Counter = field(default_factory=Counter)

    @property
    def shape(self):
        return self.to_aoa_mean.shape[:3]

    def to_aoa(self, m: int, k: int, t: int) -> GaussianBelief:
        return GaussianBelief(self.to_aoa_mean[m, k, t], self.to_aoa_cov[m, k, t])

    def fused(self, k: int, t: int) -> GaussianBelief:
        return GaussianBelief(self.fused_mean[k, t], self.fused_cov[k, t])

    def beliefs(self):
        """Every stored Gaussian message, for PSD auditing"""
        mkt = self.to_aoa_cov.reshape(-1, 3, 3)
        kt = [self.fused_cov, self.position_cov, self.attitude_cov, self.feedback_cov]
        return [c for c in mkt] + [c for block in kt for c in block.reshape(-1, 3, 3)]


@dataclass(frozen=True, eq=False)
class AppleContext:
    """Per-run constants shared by the message updates"""
    plan: PartitionPlan
    local: np.ndarray            # (T, 2) activated antenna offsets
    cfg: AppleConfig
    noise_power: float
    sigma_rho2: float
    init_range: float

    @property
    def refs(self) -> np.ndarray:
        return self.plan.ref_positions()


@dataclass(eq=False)
class AppleResult:
    estimates: List[PoseEstimate]
    flags: Counter
    iterations: int
    noise_power: float


def init_messages(num_subarrays: int, num_ms: int, num_slots: int, cfg: AppleConfig) -> MessageState:
    if cfg.sigma_ini <= 0:
        raise InvalidInputError("sigma_ini must be positive")
    shape = (num_subarrays, num_ms, num_slots)
    var = cfg.sigma_ini ** 2

    def means(*dims):
        return np.broadcast_to(INITIAL_MEAN, (*dims, 3)).copy()

    def covs(*dims):
        return np.broadcast_to(var * np.eye(3), (*dims, 3, 3)).copy()

    kt = (num_ms, num_slots)
    return MessageState(
        to_aoa_mean=means(*shape), to_aoa_cov=covs(*shape),
        ext_chi=np.zeros((*shape, 2)), ext_kappa=np.zeros((*shape, 2)),
        coefficients=np.zeros(shape, dtype=complex),
        fused_mean=means(*kt), fused_cov=covs(*kt),
        position_mean=means(*kt), position_cov=covs(*kt),
        attitude_mean=np.zeros((*kt, 3)), attitude_cov=covs(*kt),
        feedback_mean=means(*kt), feedback_cov=covs(*kt),
    )


# AoA module


def _assignment(reference: np.ndarray, candidates: np.ndarray, magnitudes: np.ndarray) -> np.ndarray:
    """perm[k] = candidate matched to reference k by minimal summed cosine distance"""
    cost = np.linalg.norm(reference[:, None, :] - candidates[None, :, :], axis=2)
    # Ties go to the stronger component
    cost = cost - 1e-12 * magnitudes[None, :] / max(float(np.max(magnitudes)), 1e-300)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(reference), dtype=int)
    perm[rows] = cols
    return perm


def associate_components(cosines: np.ndarray, magnitudes: np.ndarray, anchor: int) -> np.ndarray:
    """Label permutations (M, T, K) mapping MS k to estimator component perm[m, t, k].

    The anchor subarray at t=0 orders MS labels by descending coefficient
    magnitude; the anchor at later slots follows the t=0 labels by cosine
    proximity; every other subarray follows the anchor of its own slot.
    """
    num_subarrays, num_slots, count = magnitudes.shape
    perm = np.empty((num_subarrays, num_slots, count), dtype=int)
    perm[anchor, 0] = np.argsort(-magnitudes[anchor, 0], kind="stable")
    labelled = cosines[anchor, 0][perm[anchor, 0]]
    for t in range(1, num_slots):
        perm[anchor, t] = _assignment(labelled, cosines[anchor, t], magnitudes[anchor, t])
    for t in range(num_slots):
        reference = cosines[anchor, t][perm[anchor, t]]
        for m in range(num_subarrays):
            if m != anchor:
                perm[m, t] = _assignment(reference, cosines[m, t], magnitudes[m, t])
    return perm


def aoa_module_pass(state: MessageState, signal: ReceivedSignal, ctx: AppleContext) -> MessageState:
    num_subarrays, num_ms, num_slots = state.shape
    refs = ctx.refs
    cfg = ctx.cfg
    cosines = np.zeros((num_subarrays, num_slots, num_ms, 2))
    magnitudes = np.zeros((num_subarrays, num_slots, num_ms))
    ext_chi = np.zeros((num_subarrays, num_slots, num_ms, 2))
    ext_kappa = np.zeros((num_subarrays, num_slots, num_ms, 2))
    coefficients = np.zeros((num_subarrays, num_slots, num_ms), dtype=complex)

    for m, sub in enumerate(ctx.plan.subarrays):
        for t in range(num_slots):
            priors = [SourcePrior(gaussian_to_vm(state.to_aoa(m, k, t), refs[m]), ctx.sigma_rho2)
                      for k in range(num_ms)]
            snapshot = SubarraySnapshot(signal.snapshot(ctx.plan, sub.m, t + 1), ctx.noise_power, num_ms)
            posteriors = estimate_aoa_posteriors(snapshot, priors, cfg.max_sweeps, cfg.aoa_tolerance,
                                                 cfg.zero_padding, cfg.ascent)
            extrinsics = extrinsic_from_posterior(posteriors, priors)
            for k, (post, ext) in enumerate(zip(posteriors, extrinsics)):
                if post.flagged:
                    state.flags["aoa_flagged"] += 1
                cosines[m, t, k] = post.cosines
                magnitudes[m, t, k] = abs(post.coefficient_mean)
                coefficients[m, t, k] = post.coefficient_mean
                ext_chi[m, t, k] = ext.chi
                ext_kappa[m, t, k] = ext.kappa

    if state.iteration == 0 and num_ms > 1:
        perm = associate_components(cosines, magnitudes, ctx.plan.nearest_to_center() - 1)
        index = np.indices(perm.shape)
        ext_chi = ext_chi[index[0], index[1], perm]
        ext_kappa = ext_kappa[index[0], index[1], perm]
        coefficients = coefficients[index[0], index[1], perm]

    state.ext_chi = ext_chi.transpose(0, 2, 1, 3).copy()
    state.ext_kappa = ext_kappa.transpose(0, 2, 1, 3).copy()
    state.coefficients = coefficients.transpose(0, 2, 1).copy()
    return state


# Information fusion


class FusionObjective:
    """sum_m sum_l kappa_ml cos(pi * phi_l(p; ref_m) - chi_ml) over included subarrays"""

    def __init__(self, refs: np.ndarray, chi: np.ndarray, kappa: np.ndarray,
                 exclude: Optional[int] = None):
        keep = np.ones(len(refs), dtype=bool)
        if exclude is not None:
            keep[exclude] = False
        self.refs = refs[keep]
        self.chi = chi[keep]
        self.kappa = kappa[keep]

    @property
    def informative(self) -> bool:
        return bool(self.kappa.size) and float(np.max(self.kappa)) > 0

    def _geometry(self, p):
        diff = np.asarray(p, dtype=float)[None, :] - self.refs
        dist = np.linalg.norm(diff, axis=1)
        unit = diff / dist[:, None]
        return dist, unit, unit[:, :2]

    def value(self, p) -> float:
        _, _, phi = self._geometry(p)
        return float(np.sum(self.kappa * np.cos(np.pi * phi - self.chi)))

    def _grads(self, dist, unit, phi):
        eye = np.eye(3)[:2]
        return (eye[None, :, :] - phi[:, :, None] * unit[:, None, :]) / dist[:, None, None]

    def gradient(self, p) -> np.ndarray:
        dist, unit, phi = self._geometry(p)
        weight = -self.kappa * np.pi * np.sin(np.pi * phi - self.chi)
        return np.einsum("ml,mlj->j", weight, self._grads(dist, unit, phi))

    def hessian(self, p) -> np.ndarray:
        dist, unit, phi = self._geometry(p)
        grads = self._grads(dist, unit, phi)
        angle = np.pi * phi - self.chi
        outer = np.einsum("mli,mlj->mlij", grads, grads)
        eye = np.eye(3)
        e = eye[:2]
        uu = np.einsum("mi,mj->mij", unit, unit)
        eu = np.einsum("li,mj->mlij", e, unit)
        second = (-(eu + eu.transpose(0, 1, 3, 2))
                  - phi[:, :, None, None] * eye
                  + 3 * phi[:, :, None, None] * uu[:, None, :, :]) / dist[:, None, None, None] ** 2
        w1 = -self.kappa * np.pi ** 2 * np.cos(angle)
        w2 = -self.kappa * np.pi * np.sin(angle)
        return np.einsum("ml,mlij->ij", w1, outer) + np.einsum("ml,mlij->ij", w2, second)


def _ray_direction(chi: np.ndarray) -> np.ndarray:
    phi = np.clip(chi / np.pi, -1.0, 1.0)
    z = math.sqrt(max(0.0, 1.0 - float(phi @ phi)))
    d = np.array([phi[0], phi[1], z])
    return d / np.linalg.norm(d)


def triangulate(refs: np.ndarray, chi: np.ndarray, kappa: np.ndarray, fallback_range: float) -> np.ndarray:
    """Least-squares intersection of the rays of the two widest-separated informative subarrays"""
    informative = np.flatnonzero(np.min(kappa, axis=1) > INFORMATIVE_KAPPA * max(float(np.max(kappa)), 1e-300))
    if informative.size == 0:
        return INITIAL_MEAN.copy()
    first = int(informative[0])
    if informative.size >= 2:
        pts = refs[informative]
        gaps = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        a, b = np.unravel_index(int(np.argmax(gaps)), gaps.shape)
        chosen = [int(informative[a]), int(informative[b])]
        lhs = np.zeros((3, 3))
        rhs = np.zeros(3)
        for m in chosen:
            d = _ray_direction(chi[m])
            proj = np.eye(3) - np.outer(d, d)
            lhs += proj
            rhs += proj @ refs[m]
        point, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        if np.all(np.isfinite(point)) and point[2] > 0 and np.linalg.cond(lhs) < 1e12:
            return point
        first = chosen[0]
    return refs[first] + fallback_range * _ray_direction(chi[first])


def fuse_antenna_position(state: MessageState, ctx: AppleContext, k: int, t: int) -> GaussianBelief:
    refs = ctx.refs
    objective = FusionObjective(refs, state.ext_chi[:, k, t], state.ext_kappa[:, k, t])
    if state.iteration == 0:
        init = triangulate(refs, state.ext_chi[:, k, t], state.ext_kappa[:, k, t], ctx.init_range)
    else:
        init = state.fused_mean[k, t]
    if not objective.informative:
        state.flags["fusion_flat"] += 1
        return GaussianBelief.isotropic(init, ctx.cfg.sigma_ini)
    fit = laplace_fit(objective.value, init, ctx.cfg.ascent, objective.gradient, objective.hessian)
    if fit.regularized:
        state.flags["fusion_regularized"] += 1
    if not fit.converged:
        state.flags["fusion_nonconverged"] += 1
        return GaussianBelief(init, fit.belief.covariance)
    return fit.belief


class PoseObjective:
    """Gaussian antenna-position likelihoods over the included slots plus pose priors"""

    def __init__(self, local: np.ndarray, means: np.ndarray, precisions: np.ndarray,
                 include: np.ndarray, position_std: float, prior: AttitudePrior):
        self.local = local[include]
        self.means = means[include]
        self.precisions = precisions[include]
        self.position_var = position_std ** 2
        self.chi = np.asarray(prior.chi, dtype=float)
        self.kappa = np.asarray(prior.kappa, dtype=float)
        # pitch prior lives on 2*theta_y
        self.mult = np.array([1.0, 2.0, 1.0])

    def _residuals(self, x):
        basis = rotation_basis(x[3:6]).matrix
        return self.means - x[:3] - self.local @ basis.T

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        res = self._residuals(x)
        quad = np.einsum("ti,tij,tj->", res, self.precisions, res)
        prior = self.kappa @ np.cos(self.mult * x[3:6] - self.chi)
        return float(-0.5 * quad - x[:3] @ x[:3] / (2 * self.position_var) + prior)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        res = self._residuals(x)
        weighted = np.einsum("tij,tj->ti", self.precisions, res)
        lever = np.einsum("ial,ta->til", rotation_basis_derivatives(x[3:6]), self.local)
        grad = np.empty(6)
        grad[:3] = weighted.sum(axis=0) - x[:3] / self.position_var
        grad[3:] = np.einsum("ti,til->l", weighted, lever)
        grad[3:] -= self.kappa * self.mult * np.sin(self.mult * x[3:6] - self.chi)
        return grad

    def hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        res = self._residuals(x)
        weighted = np.einsum("tij,tj->ti", self.precisions, res)
        lever = np.einsum("ial,ta->til", rotation_basis_derivatives(x[3:6]), self.local)
        curve = np.einsum("iabc,ta->tibc", rotation_basis_second_derivatives(x[3:6]), self.local)
        hess = np.zeros((6, 6))
        hess[:3, :3] = -self.precisions.sum(axis=0) - np.eye(3) / self.position_var
        cross = -np.einsum("tij,tjl->il", self.precisions, lever)
        hess[:3, 3:] = cross
        hess[3:, :3] = cross.T
        hess[3:, 3:] = (-np.einsum("tia,tij,tjb->ab", lever, self.precisions, lever)
                        + np.einsum("ti,tiab->ab", weighted, curve))
        hess[3:, 3:] -= np.diag(self.kappa * self.mult ** 2 * np.cos(self.mult * x[3:6] - self.chi))
        return hess


def _pose_objective(state: MessageState, ctx: AppleContext, k: int, include: np.ndarray) -> PoseObjective:
    precisions = np.stack([state.fused(k, t).precision() for t in range(state.shape[2])])
    return PoseObjective(ctx.local, state.fused_mean[k], precisions, include,
                         ctx.cfg.position_prior_std, ctx.cfg.prior_for(k))


def _initial_pose(ctx: AppleContext, means: np.ndarray, include: np.ndarray) -> np.ndarray:
    if int(include.sum()) >= 2:
        return rigid_alignment(ctx.local[include], means[include]).to_vector()
    anchor = means[include][0] - np.concatenate([ctx.local[include][0], [0.0]])
    return np.concatenate([anchor, np.zeros(3)])


def update_pose_messages(state: MessageState, ctx: AppleContext, k: int) -> MessageState:
    """Leave-one-slot-out MAP of (p, theta) for every slot t"""
    num_slots = state.shape[2]
    for t in range(num_slots):
        include = np.ones(num_slots, dtype=bool)
        include[t] = False
        if not include.any():
            state.flags["pose_unobserved"] += 1
            state.position_mean[k, t] = state.fused_mean[k, t]
            state.position_cov[k, t] = ctx.cfg.position_prior_std ** 2 * np.eye(3)
            state.attitude_mean[k, t] = np.zeros(3)
            state.attitude_cov[k, t] = np.eye(3) * math.pi ** 2
            continue
        objective = _pose_objective(state, ctx, k, include)
        init = _initial_pose(ctx, state.fused_mean[k], include)
        fit = laplace_fit(objective.value, init, ctx.cfg.ascent, objective.gradient, objective.hessian)
        if fit.regularized:
            state.flags["pose_regularized"] += 1
        if not fit.converged:
            state.flags["pose_nonconverged"] += 1
        mean = fit.belief.mean
        attitude = canonical_euler(*mean[3:6])
        cov = fit.belief.covariance
        state.position_mean[k, t] = mean[:3]
        state.position_cov[k, t] = cov[:3, :3]
        state.attitude_mean[k, t] = attitude.as_array()
        state.attitude_cov[k, t] = cov[3:, 3:]
    return state


def project_pose_to_antennas(state: MessageState, ctx: AppleContext, k: int, t: int) -> GaussianBelief:
    """Antenna-position Gaussian through the first-order rotation expansion"""
    theta = state.attitude_mean[k, t]
    q = ctx.local[t]
    mean = state.position_mean[k, t] + rotation_basis(theta).matrix @ q
    lever = np.einsum("ial,a->il", rotation_basis_derivatives(theta), q)
    cov = state.position_cov[k, t] + lever @ state.attitude_cov[k, t] @ lever.T
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def feedback_messages(state: MessageState, ctx: AppleContext, m: int, k: int, t: int,
                      projected: Optional[GaussianBelief] = None) -> GaussianBelief:
    """Projection combined with the leave-subarray-m-out fusion Gaussian"""
    projected = projected or project_pose_to_antennas(state, ctx, k, t)
    if state.shape[0] == 1:
        return projected
    objective = FusionObjective(ctx.refs, state.ext_chi[:, k, t], state.ext_kappa[:, k, t], exclude=m)
    if not objective.informative:
        return projected
    fit = laplace_fit(objective.value, state.fused_mean[k, t], ctx.cfg.ascent,
                      objective.gradient, objective.hessian)
    eig = np.linalg.eigvalsh(fit.hessian)
    if eig[-1] > 1e-6 * max(float(np.max(np.abs(eig))), 1e-300):
        state.flags["feedback_dropped"] += 1
        return projected
    return projected.combine(fit.belief)


def final_map(state: MessageState, ctx: AppleContext) -> List[PoseEstimate]:
    num_ms, num_slots = state.shape[1:]
    include = np.ones(num_slots, dtype=bool)
    estimates = []
    for k in range(num_ms):
        objective = _pose_objective(state, ctx, k, include)
        starts = [np.concatenate([state.position_mean[k, t], state.attitude_mean[k, t]])
                  for t in range(num_slots)]
        init = max(starts, key=objective.value)
        fit = laplace_fit(objective.value, init, ctx.cfg.ascent, objective.gradient, objective.hessian)
        flagged = not fit.converged
        if flagged:
            state.flags["final_nonconverged"] += 1
        estimates.append(PoseEstimate.from_vector(fit.belief.mean, fit.belief.covariance, flagged))
    return estimates


def _audit(state: MessageState):
    bad = sum(not GaussianBelief(np.zeros(3), c).is_psd() for c in state.beliefs())
    if bad:
        state.flags["non_psd"] += bad
        logger.warning(f"{bad} messages with non-PSD covariance after iteration {state.iteration}")


def default_coefficient_variance(scenario: ScenarioConfig) -> float:
    """Link budget beta^2 lambda^2 Px / (4 pi r_nom)^2 at the mid-range distance"""
    beta2 = float(np.mean([scenario.gain(k) ** 2 for k in range(scenario.num_ms)]))
    r_nom = scenario.draw.mid_distance
    return beta2 * scenario.wavelength ** 2 * scenario.tx_power_w / (4 * math.pi * r_nom) ** 2


def build_context(scenario: ScenarioConfig, plan: PartitionPlan, cfg: AppleConfig,
                  noise_power: float) -> AppleContext:
    pattern = resolve_pattern(scenario.pattern, scenario.ms)
    local = pattern.local_positions(scenario.ms, scenario.wavelength)
    sigma_rho2 = cfg.sigma_rho2 or default_coefficient_variance(scenario)
    init_range = cfg.init_range or scenario.draw.mid_distance
    return AppleContext(plan, local, cfg, noise_power, sigma_rho2, init_range)


@numerical_boundary("APPLE")
def run(signal: ReceivedSignal, scenario: ScenarioConfig, plan: PartitionPlan,
        cfg: Optional[AppleConfig] = None, guard: Optional[np.ndarray] = None,
        noise_power: Optional[float] = None) -> AppleResult:
    """Full APPLE loop followed by the final MAP"""
    cfg = cfg or AppleConfig()
    if cfg.noise_mode == "guard" and guard is not None:
        noise_power = float(np.mean(np.abs(guard) ** 2))
    elif noise_power is None:
        noise_power = scenario.noise_power_w

    ctx = build_context(scenario, plan, cfg, noise_power)
    num_slots = len(ctx.local)
    if signal.num_slots != num_slots or signal.num_antennas != plan.bs.num_antennas:
        raise InvalidInputError(
            "signal does not match the scenario",
            details=f"signal {signal.samples.shape}, expected ({plan.bs.num_antennas}, {num_slots})",
        )
    num_ms = scenario.num_ms
    iterations = cfg.resolve_iterations(num_ms)
    state = init_messages(plan.num_subarrays, num_ms, num_slots, cfg)

    for iteration in range(iterations):
        logger.debug(f"APPLE iteration {iteration + 1}/{iterations}")
        aoa_module_pass(state, signal, ctx)
        for k in range(num_ms):
            for t in range(num_slots):
                belief = fuse_antenna_position(state, ctx, k, t)
                state.fused_mean[k, t] = belief.mean
                state.fused_cov[k, t] = belief.covariance
        for k in range(num_ms):
            update_pose_messages(state, ctx, k)
        if iteration + 1 < iterations:
            for k in range(num_ms):
                for t in range(num_slots):
                    projected = project_pose_to_antennas(state, ctx, k, t)
                    state.feedback_mean[k, t] = projected.mean
                    state.feedback_cov[k, t] = projected.covariance
                    for m in range(plan.num_subarrays):
                        message = feedback_messages(state, ctx, m, k, t, projected)
                        state.to_aoa_mean[m, k, t] = message.mean
                        state.to_aoa_cov[m, k, t] = message.covariance
        state.iteration += 1
        if settings.debug:
            _audit(state)

    estimates = final_map(state, ctx)
    if state.flags:
        logger.debug(f"APPLE flags: {dict(state.flags)}")
    return AppleResult(estimates, state.flags, iterations, noise_power)
