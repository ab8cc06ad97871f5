"""Pydantic models for scenario, estimator and experiment data structures"""

import math
from datetime import datetime
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SPEED_OF_LIGHT = 299_792_458.0


def dbm_to_watts(dbm: float) -> float:
    """Convert a power level in dBm to watts"""
    return 10.0 ** ((dbm - 30.0) / 10.0)


class RunStatus(str, Enum):
    """Status of an estimation or sweep run"""
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


class EstimatorName(str, Enum):
    """Estimators the harness can run"""
    APPLE = "apple"
    BASELINE = "baseline"


class SweepVariable(str, Enum):
    """Scenario quantity varied along a sweep"""
    TX_POWER = "tx_power_dbm"
    PARTITIONS = "partitions"
    PATTERN = "pattern"
    RICIAN = "rician_k_factor"
    DISTANCE = "distance"


class UraSpec(BaseModel):
    """Uniform rectangular array of half-wavelength spaced antennas"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    nx: int = Field(..., ge=1, description="Antennas along x")
    ny: int = Field(..., ge=1, description="Antennas along y")

    @property
    def num_antennas(self) -> int:
        return self.nx * self.ny

    def spacing(self, wavelength: float) -> float:
        """Inter-element spacing in meters"""
        return wavelength / 2.0

    def largest_dimension(self, wavelength: float) -> float:
        """Aperture diagonal sqrt(Sx^2 + Sy^2) with S = (n - 1) * spacing"""
        sx = (self.nx - 1) * self.spacing(wavelength)
        sy = (self.ny - 1) * self.spacing(wavelength)
        return math.hypot(sx, sy)


class PoseConfig(BaseModel):
    """Fixed MS pose given in a scenario file"""
    model_config = ConfigDict(extra="forbid")

    x: float
    y: float
    z: float
    roll: float = 0.0
    pitch: float = Field(0.0, ge=-math.pi / 2, le=math.pi / 2)
    yaw: float = 0.0


class PoseDrawRanges(BaseModel):
    """Supports of the random pose draws"""
    model_config = ConfigDict(extra="forbid")

    distance_min: float = Field(5.0, gt=0, description="Minimum BS-MS distance (m)")
    distance_max: float = Field(8.0, gt=0, description="Maximum BS-MS distance (m)")
    azimuth_min: float = 0.0
    azimuth_max: float = 2 * math.pi
    elevation_min: float = Field(math.pi / 12, ge=-math.pi / 2, le=math.pi / 2)
    elevation_max: float = Field(math.pi / 2, ge=-math.pi / 2, le=math.pi / 2)
    roll_max: float = Field(math.pi, ge=0, le=math.pi)
    pitch_max: float = Field(math.pi / 3, ge=0, le=math.pi / 2)
    yaw_max: float = Field(math.pi, ge=0, le=math.pi)

    @model_validator(mode="after")
    def check_ordering(self):
        if self.distance_max < self.distance_min:
            raise ValueError("distance_max must be >= distance_min")
        if self.elevation_max < self.elevation_min:
            raise ValueError("elevation_max must be >= elevation_min")
        return self

    @property
    def mid_distance(self) -> float:
        return 0.5 * (self.distance_min + self.distance_max)


class ScenarioConfig(BaseModel):
    """Simulation scenario: arrays, poses, powers and channel"""
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="constants")

    carrier_frequency_hz: float = Field(28e9, gt=0, description="Carrier frequency (Hz)")
    bs: UraSpec = Field(default_factory=lambda: UraSpec(nx=32, ny=32), description="BS array")
    ms: UraSpec = Field(default_factory=lambda: UraSpec(nx=16, ny=16), description="MS array")
    num_ms: int = Field(1, ge=1, description="Number of mobile stations K")
    poses: Optional[List[PoseConfig]] = Field(None, description="Fixed poses; drawn when omitted")
    draw: PoseDrawRanges = Field(default_factory=PoseDrawRanges)
    pattern: Union[str, List[Tuple[int, int]]] = Field("T5", description="Transmit pattern name or (q, s) list")
    tx_power_dbm: float = Field(20.0, description="Transmit power Px (dBm)")
    noise_power_dbm: float = Field(-70.0, description="Noise power per sample (dBm)")
    gains: Optional[List[float]] = Field(None, description="Antenna gains beta_k, default 1")
    rician_k_factor: float = Field(math.inf, gt=0, description="Rician K-factor, inf for pure LoS")
    partition_x: int = Field(4, ge=1, description="Subarrays along x")
    partition_y: int = Field(4, ge=1, description="Subarrays along y")
    seed: int = Field(0, ge=0, description="RNG seed")
    allow_reactive_near_field: bool = Field(False, description="Skip the Fresnel-distance check")

    @field_validator("pattern")
    @classmethod
    def validate_pattern(cls, v):
        if isinstance(v, str):
            v = v.strip().upper()
            if v not in ("T3", "T5", "T9"):
                raise ValueError(f"unknown transmit pattern {v!r}")
        elif not v:
            raise ValueError("transmit pattern must not be empty")
        return v

    @model_validator(mode="after")
    def check_counts(self):
        if self.poses is not None and len(self.poses) != self.num_ms:
            raise ValueError(f"{len(self.poses)} poses given for num_ms={self.num_ms}")
        if self.gains is not None and len(self.gains) != self.num_ms:
            raise ValueError(f"{len(self.gains)} gains given for num_ms={self.num_ms}")
        return self

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    @property
    def tx_power_w(self) -> float:
        return dbm_to_watts(self.tx_power_dbm)

    @property
    def noise_power_w(self) -> float:
        return dbm_to_watts(self.noise_power_dbm)

    @property
    def num_subarrays(self) -> int:
        return self.partition_x * self.partition_y

    def gain(self, k: int) -> float:
        """Gain of MS k (0-based)"""
        return 1.0 if self.gains is None else self.gains[k]


class AscentOptions(BaseModel):
    """Gradient-ascent and Laplace-fit options"""
    model_config = ConfigDict(extra="forbid")

    initial_step: float = Field(1.0, gt=0)
    backtrack_factor: float = Field(0.5, gt=0, lt=1)
    armijo: float = Field(1e-4, gt=0, lt=1)
    gradient_tol: float = Field(1e-8, gt=0)
    max_iterations: int = Field(200, ge=0)
    fd_step: float = Field(1e-6, gt=0, description="Relative central-difference step")
    hessian_cap: float = Field(-1e-9, lt=0, description="Largest allowed Hessian eigenvalue")


class AttitudePrior(BaseModel):
    """Von-Mises attitude prior per axis (roll, pitch, yaw)"""
    model_config = ConfigDict(extra="forbid")

    chi: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    kappa: Tuple[float, float, float] = (1e-6, 1e-6, 1e-6)

    @field_validator("kappa")
    @classmethod
    def validate_kappa(cls, v):
        if any(k < 0 for k in v):
            raise ValueError("concentrations must be non-negative")
        return v


class AppleConfig(BaseModel):
    """Message-passing estimator configuration"""
    model_config = ConfigDict(extra="forbid")

    iterations: Optional[int] = Field(None, ge=1, description="Default 1 for K=1, 5 otherwise")
    sigma_ini: float = Field(1e3, gt=0, description="Std of the initial position messages (m)")
    sigma_rho2: Optional[float] = Field(None, gt=0, description="Coefficient prior variance")
    position_prior_std: float = Field(1e3, gt=0, description="Position prior std (m)")
    attitude_prior: AttitudePrior = Field(default_factory=AttitudePrior)
    attitude_priors: Optional[List[AttitudePrior]] = Field(None, description="Per-MS override")
    max_sweeps: int = Field(20, ge=1, description="AoA estimator coordinate-ascent sweeps")
    aoa_tolerance: float = Field(1e-6, gt=0)
    zero_padding: int = Field(4, ge=1, description="Periodogram oversampling factor")
    init_range: Optional[float] = Field(None, gt=0, description="Range used when only one ray exists")
    noise_mode: Literal["genie", "guard"] = "genie"
    guard_samples: int = Field(64, ge=1, description="Noise-only columns for the guard estimate")
    ascent: AscentOptions = Field(default_factory=AscentOptions)

    def resolve_iterations(self, num_ms: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return 1 if num_ms == 1 else 5

    def prior_for(self, k: int) -> AttitudePrior:
        if self.attitude_priors is not None:
            return self.attitude_priors[k]
        return self.attitude_prior


class McrbOptions(BaseModel):
    """Derivative steps and thresholds of the misspecified bound"""
    model_config = ConfigDict(extra="forbid")

    pose_step: float = Field(1e-6, gt=0, description="First-derivative step in pose entries")
    second_step: float = Field(1e-4, gt=0, description="Second-derivative step in pose entries")
    condition_limit: float = Field(1e12, gt=1)
    pseudotrue_method: Literal["quasi_newton", "grid"] = "quasi_newton"
    max_iterations: int = Field(200, ge=1)
    gradient_tol: float = Field(1e-12, gt=0)
    grid_points: int = Field(9, ge=3)
    grid_rounds: int = Field(8, ge=1)
    grid_span: float = Field(1e-3, gt=0)


class BaselineOptions(BaseModel):
    """Far-field two-stage baseline options"""
    model_config = ConfigDict(extra="forbid")

    search_resolution: float = Field(1e-3, gt=0, le=0.5, description="Cosine grid step")
    detection_snr: float = Field(10.0, gt=0, description="Minimum linear SNR of a peak")
    range_prior: Optional[float] = Field(None, gt=0, description="Initial range (m)")
    attitude_starts: int = Field(8, ge=1, description="Yaw seeds of the pose fit")


class SweepSpec(BaseModel):
    """Monte-Carlo parameter sweep"""
    model_config = ConfigDict(extra="forbid")

    variable: SweepVariable = SweepVariable.TX_POWER
    values: List[Union[float, str]] = Field(..., min_length=1)
    trials: int = Field(50, ge=1)
    base_seed: int = Field(0, ge=0)
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    apple: AppleConfig = Field(default_factory=AppleConfig)
    baseline: BaselineOptions = Field(default_factory=BaselineOptions)
    mcrb: McrbOptions = Field(default_factory=McrbOptions)
    estimators: List[EstimatorName] = Field(default_factory=lambda: [EstimatorName.APPLE])
    compute_bound: bool = False


class MetricRow(BaseModel):
    """Aggregated metrics of one estimator at one sweep point"""
    variable: str
    value: str
    estimator: str
    rmse_position: Optional[float] = Field(None, ge=0, description="Position RMSE (m), None without successful trials")
    nmse_rotation: Optional[float] = Field(None, ge=0, description="Rotation NMSE")
    bound_position: Optional[float] = Field(None, ge=0)
    bound_rotation: Optional[float] = Field(None, ge=0)
    trials: int = Field(..., ge=0)
    failed: int = Field(0, ge=0)
    wall_time_s: float = Field(0.0, ge=0)


class PoseRecord(BaseModel):
    """One MS pose, estimated or true"""
    ms: int
    x: float
    y: float
    z: float
    roll: float
    pitch: float
    yaw: float
    position_error: Optional[float] = None
    rotation_nmse: Optional[float] = None


class BoundRecord(BaseModel):
    """Per-MS bound extract"""
    ms: int
    position_bound: float
    attitude_bound: float
    rotation_nmse_bound: float


class EstimateRequest(BaseModel):
    """Simulate one scene and run estimators on it"""
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    apple: AppleConfig = Field(default_factory=AppleConfig)
    baseline: BaselineOptions = Field(default_factory=BaselineOptions)
    estimators: List[EstimatorName] = Field(default_factory=lambda: [EstimatorName.APPLE])
    seed: int = Field(0, ge=0)


class EstimateResponse(BaseModel):
    """Result of a single-scene estimation"""
    request_id: str
    status: RunStatus
    truth: List[PoseRecord] = Field(default_factory=list)
    estimates: Dict[str, List[PoseRecord]] = Field(default_factory=dict)
    flags: Dict[str, int] = Field(default_factory=dict)
    error_message: Optional[str] = None
    created_at: datetime = Field(default_factory=datetime.now)


class BoundRequest(BaseModel):
    """Bound for one (drawn or fixed) scene"""
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    mcrb: McrbOptions = Field(default_factory=McrbOptions)
    seed: int = Field(0, ge=0)


class BoundResponse(BaseModel):
    rows: List[BoundRecord]
    truth: List[PoseRecord]
    flags: Dict[str, int] = Field(default_factory=dict)


class ServiceStats(BaseModel):
    """Counters of runs served"""
    estimates: int = 0
    bounds: int = 0
    sweeps: int = 0
    failures: int = 0


class HealthCheck(BaseModel):
    """Health check response"""
    status: str = "healthy"
    timestamp: datetime = Field(default_factory=datetime.now)
    version: str = "1.0.0"


class ErrorResponse(BaseModel):
    """Error response model"""
    error: str
    details: Optional[str] = None
    timestamp: datetime = Field(default_factory=datetime.now)
