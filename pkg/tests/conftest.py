"""Shared scenes for the test suite"""

import numpy as np
import pytest

from src.core.channel import ReceivedSignal, scenario_poses, swff_channel, swff_coefficients
from src.core.partition import uniform_partition
from src.models.schemas import PoseConfig, ScenarioConfig, UraSpec


def make_scenario(bs=8, ms=4, parts=2, pattern="T3", poses=None, **kwargs) -> ScenarioConfig:
    poses = poses or [PoseConfig(x=0.3, y=-0.2, z=1.2, roll=0.2, pitch=-0.1, yaw=0.4)]
    return ScenarioConfig(
        bs=UraSpec(nx=bs, ny=bs),
        ms=UraSpec(nx=ms, ny=ms),
        partition_x=parts,
        partition_y=parts,
        pattern=pattern,
        num_ms=len(poses),
        poses=poses,
        **kwargs,
    )


def swff_signal(scenario: ScenarioConfig, plan) -> ReceivedSignal:
    coeffs = swff_coefficients(scenario, plan, scenario_poses(scenario))
    return ReceivedSignal(swff_channel(coeffs, plan))


@pytest.fixture
def small_scenario() -> ScenarioConfig:
    """8x8 BS in 2x2 subarrays, 4x4 MS, pattern T3, one MS at about 1.2 m"""
    return make_scenario()


@pytest.fixture
def small_plan(small_scenario):
    s = small_scenario
    return uniform_partition(s.bs, s.partition_x, s.partition_y, s.wavelength)


@pytest.fixture
def desk_scenario() -> ScenarioConfig:
    """16x16 BS in 4x4 subarrays, 4x4 MS, pattern T5, one MS at about 2 m"""
    return make_scenario(
        bs=16, ms=4, parts=4, pattern="T5",
        poses=[PoseConfig(x=0.4, y=-0.3, z=2.0, roll=0.2, pitch=-0.1, yaw=0.5)],
    )


@pytest.fixture
def desk_plan(desk_scenario):
    s = desk_scenario
    return uniform_partition(s.bs, s.partition_x, s.partition_y, s.wavelength)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
