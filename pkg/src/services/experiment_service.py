"""Service layer for simulations, estimations, bounds and Monte-Carlo sweeps"""

import logging
import math
import time
import uuid
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..config.settings import settings
from ..core import apple
from ..core.baseline import run_baseline
from ..core.channel import (
    ReceivedSignal,
    draw_poses,
    scenario_poses,
    simulate_guard,
    simulate_received,
    with_poses,
)
from ..core.exceptions import ConfigurationError, EstimationError, NearFieldError
from ..core.geometry import Pose
from ..core.logging_config import format_flags, setup_worker_logging
from ..core.mcrb import McrbResult, compute_bound
from ..core.partition import PartitionPlan, uniform_partition
from ..models.schemas import (
    AppleConfig,
    BaselineOptions,
    BoundRecord,
    BoundRequest,
    BoundResponse,
    EstimateRequest,
    EstimateResponse,
    EstimatorName,
    MetricRow,
    PoseRecord,
    RunStatus,
    ScenarioConfig,
    ServiceStats,
    SweepSpec,
    SweepVariable,
)

logger = logging.getLogger(__name__)


def pose_errors(estimates: Sequence, truths: Sequence[Pose]) -> Tuple[float, float]:
    """(sum_k ||p_k - p_hat_k||^2, sum_k ||R_k - R_hat_k||_F^2 / ||R_k||_F^2) for one trial"""
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates for {len(truths)} true poses")
    position = 0.0
    rotation = 0.0
    for est, truth in zip(estimates, truths):
        position += float(np.sum((np.asarray(est.position) - truth.position) ** 2))
        r_true = truth.basis.matrix
        rotation += float(np.sum((r_true - est.basis.matrix) ** 2)) / float(np.sum(r_true ** 2))
    return position, rotation


def compute_metrics(estimates: Sequence[Sequence], truths: Sequence[Sequence[Pose]]) -> Tuple[float, float]:
    """(RMSE of positions, NMSE of rotations) averaged over trials"""
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} trials of estimates for {len(truths)} trials of truth")
    if not estimates:
        raise ValueError("no trials to average")
    errors = np.array([pose_errors(e, t) for e, t in zip(estimates, truths)])
    return math.sqrt(float(errors[:, 0].mean())), float(errors[:, 1].mean())


def match_estimates(estimates: Sequence, truths: Sequence[Pose]) -> list:
    """Reorder estimates to the truth labels by minimal total position error"""
    cost = np.array([[float(np.linalg.norm(np.asarray(e.position) - t.position)) for t in truths]
                     for e in estimates])
    rows, cols = linear_sum_assignment(cost)
    ordered = [None] * len(truths)
    for r, c in zip(rows, cols):
        ordered[c] = estimates[r]
    return ordered


def apply_sweep_value(scenario: ScenarioConfig, variable: SweepVariable, value) -> ScenarioConfig:
    """Scenario at one sweep point"""
    text = str(value).strip()
    try:
        if variable == SweepVariable.TX_POWER:
            update = {"tx_power_dbm": float(text)}
        elif variable == SweepVariable.RICIAN:
            update = {"rician_k_factor": float(text)}
        elif variable == SweepVariable.PATTERN:
            name = text.upper() if text.upper().startswith("T") else f"T{int(float(text))}"
            update = {"pattern": name}
        elif variable == SweepVariable.PARTITIONS:
            if "x" in text.lower():
                mx, my = (int(v) for v in text.lower().split("x"))
            else:
                total = int(float(text))
                mx = my = math.isqrt(total)
                if mx * my != total:
                    raise ValueError(f"{total} is not a square subarray count; use 'MXxMY'")
            update = {"partition_x": mx, "partition_y": my}
        else:
            low, high = (float(v) for v in text.split(":"))
            draw = scenario.draw.model_copy(update={"distance_min": low, "distance_max": high})
            update = {"draw": draw}
        updated = scenario.model_copy(update=update)
        return ScenarioConfig.model_validate(updated.model_dump())
    except (ValueError, TypeError) as e:
        raise ConfigurationError(f"invalid {variable.value} sweep value {value!r}", details=str(e))


def partition_for(scenario: ScenarioConfig) -> PartitionPlan:
    return uniform_partition(scenario.bs, scenario.partition_x, scenario.partition_y, scenario.wavelength)


def trial_rng(base_seed: int, point: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base_seed, point, trial]))


@dataclass
class SimulatedScene:
    scenario: ScenarioConfig
    plan: PartitionPlan
    poses: List[Pose]
    signal: ReceivedSignal
    guard: Optional[np.ndarray] = None


def simulate_scene(scenario: ScenarioConfig, rng: np.random.Generator,
                   guard_samples: int = 0) -> SimulatedScene:
    """Draw poses when the scenario has none, then simulate the received signal"""
    plan = partition_for(scenario)
    poses = scenario_poses(scenario) if scenario.poses is not None else draw_poses(scenario, rng)
    signal = simulate_received(scenario, rng, poses)
    guard = simulate_guard(scenario, rng, guard_samples) if guard_samples else None
    return SimulatedScene(with_poses(scenario, poses), plan, poses, signal, guard)


def run_estimator(name: EstimatorName, scene: SimulatedScene, apple_cfg: AppleConfig,
                  baseline_opts: BaselineOptions):
    """(estimates, flags) of one estimator on one scene"""
    if name == EstimatorName.APPLE:
        result = apple.run(scene.signal, scene.scenario, scene.plan, apple_cfg, guard=scene.guard)
    else:
        result = run_baseline(scene.signal, scene.scenario, baseline_opts)
    if len(result.estimates) != scene.scenario.num_ms:
        raise EstimationError(f"{name.value} returned {len(result.estimates)} poses for {scene.scenario.num_ms} MSs")
    return result.estimates, result.flags


@dataclass
class TrialOutcome:
    """Per-trial squared errors, failures and bound traces"""
    point: int
    trial: int
    errors: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    failures: Dict[str, str] = field(default_factory=dict)
    bound: Optional[Tuple[float, float]] = None
    wall_time: Dict[str, float] = field(default_factory=dict)
    flags: Counter = field(default_factory=Counter)


def run_trial(task: Tuple[SweepSpec, ScenarioConfig, int, int]) -> TrialOutcome:
    """One Monte-Carlo trial; module-level so worker processes can run it"""
    spec, scenario, point, trial = task
    outcome = TrialOutcome(point, trial)
    rng = trial_rng(spec.base_seed, point, trial)
    guard = spec.apple.guard_samples if spec.apple.noise_mode == "guard" else 0
    try:
        scene = simulate_scene(scenario, rng, guard)
    except NearFieldError as e:
        for name in spec.estimators:
            outcome.failures[name.value] = e.message
        return outcome

    for name in spec.estimators:
        start = time.perf_counter()
        try:
            estimates, flags = run_estimator(name, scene, spec.apple, spec.baseline)
            outcome.errors[name.value] = pose_errors(match_estimates(estimates, scene.poses), scene.poses)
            outcome.flags.update({f"{name.value}.{key}": count for key, count in flags.items()})
        except NearFieldError as e:
            outcome.failures[name.value] = e.message
        outcome.wall_time[name.value] = time.perf_counter() - start

    if spec.compute_bound:
        try:
            bound = compute_bound(scene.scenario, scene.plan, scene.poses, spec.mcrb)
            outcome.bound = (float(np.sum(bound.position_bounds ** 2)), float(np.sum(bound.rotation_nmse_bounds)))
        except NearFieldError as e:
            outcome.failures["bound"] = e.message
    return outcome


def aggregate(spec: SweepSpec, value, outcomes: Sequence[TrialOutcome]) -> List[MetricRow]:
    bounds = [o.bound for o in outcomes if o.bound is not None]
    bound_position = math.sqrt(float(np.mean([b[0] for b in bounds]))) if bounds else None
    bound_rotation = float(np.mean([b[1] for b in bounds])) if bounds else None
    rows = []
    for name in spec.estimators:
        errors = [o.errors[name.value] for o in outcomes if name.value in o.errors]
        failed = len(outcomes) - len(errors)
        rows.append(MetricRow(
            variable=spec.variable.value,
            value=str(value),
            estimator=name.value,
            rmse_position=math.sqrt(float(np.mean([e[0] for e in errors]))) if errors else None,
            nmse_rotation=float(np.mean([e[1] for e in errors])) if errors else None,
            bound_position=bound_position,
            bound_rotation=bound_rotation,
            trials=len(errors),
            failed=failed,
            wall_time_s=float(sum(o.wall_time.get(name.value, 0.0) for o in outcomes)),
        ))
    return rows


def run_sweep(spec: SweepSpec, threads: int = 1) -> List[MetricRow]:
    """All sweep points in order; trial results gathered in trial-index order"""
    points = [(i, value, apply_sweep_value(spec.scenario, spec.variable, value))
              for i, value in enumerate(spec.values)]
    rows: List[MetricRow] = []
    pool = ProcessPoolExecutor(max_workers=threads, initializer=setup_worker_logging) if threads > 1 else None
    try:
        for i, value, scenario in points:
            logger.info(f"Sweep point {i + 1}/{len(points)}: {spec.variable.value}={value} ({spec.trials} trials)")
            tasks = [(spec, scenario, i, j) for j in range(spec.trials)]
            outcomes = list(pool.map(run_trial, tasks)) if pool else [run_trial(t) for t in tasks]
            point_rows = aggregate(spec, value, outcomes)
            flags = sum((o.flags for o in outcomes), Counter())
            if flags:
                logger.info(f"  flags: {format_flags(flags)}")
            for row in point_rows:
                logger.info(f"  {row.estimator}: RMSE={row.rmse_position} NMSE={row.nmse_rotation} "
                            f"failed={row.failed} ({row.wall_time_s:.1f}s)")
            rows.extend(point_rows)
    finally:
        if pool:
            pool.shutdown()
    return rows


def pose_records(poses: Sequence, truths: Optional[Sequence[Pose]] = None) -> List[PoseRecord]:
    records = []
    for k, pose in enumerate(poses):
        attitude = pose.attitude
        error = nmse = None
        if truths is not None:
            error, nmse = pose_errors([pose], [truths[k]])
            error = math.sqrt(error)
        x, y, z = (float(v) for v in pose.position)
        records.append(PoseRecord(ms=k + 1, x=x, y=y, z=z, roll=attitude.roll, pitch=attitude.pitch,
                                  yaw=attitude.yaw, position_error=error, rotation_nmse=nmse))
    return records


def bound_records(result: McrbResult) -> List[BoundRecord]:
    return [BoundRecord(ms=k + 1, position_bound=float(result.position_bounds[k]),
                        attitude_bound=float(result.attitude_bounds[k]),
                        rotation_nmse_bound=float(result.rotation_nmse_bounds[k]))
            for k in range(len(result.position_bounds))]


class ExperimentService:
    """Service layer for estimation, bound and sweep operations"""

    def __init__(self):
        self.results_cache: Dict[str, EstimateResponse] = {}
        self.stats = ServiceStats()

    def simulate(self, scenario: ScenarioConfig, seed: int, guard_samples: int = 0) -> SimulatedScene:
        logger.info(f"Simulating scene with seed {seed}")
        return simulate_scene(scenario, trial_rng(seed, 0, 0), guard_samples)

    def create_estimate(self, request: EstimateRequest) -> EstimateResponse:
        """Simulate one scene and run the requested estimators on it"""
        request_id = str(uuid.uuid4())
        response = EstimateResponse(request_id=request_id, status=RunStatus.IN_PROGRESS)
        self.results_cache[request_id] = response
        try:
            guard = request.apple.guard_samples if request.apple.noise_mode == "guard" else 0
            scene = self.simulate(request.scenario, request.seed, guard)
            response.truth = pose_records(scene.poses)
            flags = Counter()
            for name in request.estimators:
                logger.info(f"Running {name.value} for {request_id}")
                estimates, est_flags = run_estimator(name, scene, request.apple, request.baseline)
                matched = match_estimates(estimates, scene.poses)
                response.estimates[name.value] = pose_records(matched, scene.poses)
                flags.update({f"{name.value}.{key}": count for key, count in est_flags.items()})
            response.flags = dict(flags)
            response.status = RunStatus.COMPLETED
            self.stats.estimates += 1
            logger.info(f"Estimate {request_id} completed")
        except Exception as e:
            logger.error(f"Failed to create estimate {request_id}: {str(e)}")
            response.status = RunStatus.FAILED
            response.error_message = str(e)
            self.stats.failures += 1
            raise
        return response

    def get_estimate(self, request_id: str) -> Optional[EstimateResponse]:
        return self.results_cache.get(request_id)

    def compute_bounds(self, request: BoundRequest) -> BoundResponse:
        try:
            scene = self.simulate(request.scenario, request.seed)
            result = compute_bound(scene.scenario, scene.plan, scene.poses, request.mcrb)
            self.stats.bounds += 1
            return BoundResponse(rows=bound_records(result), truth=pose_records(scene.poses),
                                 flags=dict(result.flags))
        except Exception as e:
            logger.error(f"Failed to compute bounds: {str(e)}")
            self.stats.failures += 1
            raise

    def run_sweep(self, spec: SweepSpec, threads: Optional[int] = None) -> List[MetricRow]:
        threads = threads or settings.default_threads
        try:
            logger.info(f"Starting {spec.variable.value} sweep over {len(spec.values)} points")
            rows = run_sweep(spec, threads)
            self.stats.sweeps += 1
            return rows
        except Exception as e:
            logger.error(f"Failed to run sweep: {str(e)}")
            self.stats.failures += 1
            raise

    def get_service_stats(self) -> ServiceStats:
        return self.stats.model_copy()


# Global service instance
experiment_service = ExperimentService()
