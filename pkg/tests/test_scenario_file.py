import math

import pytest

from src.config.scenario_file import load_experiment, parse_experiment
from src.core.exceptions import ConfigurationError
from src.models.schemas import EstimatorName, SweepVariable

EXPERIMENT = """
[scenario]
carrier_frequency_hz = 28e9
num_ms = 2
pattern = 1:1, 4:1, 1:4
tx_power_dbm = 10
partition_x = 2
partition_y = 2
gains = 1.0, 0.5

[bs]
nx = 16
ny = 16

[ms]
nx = 4
ny = 4

[pose.1]
x = 0.5
y = 0.2
z = 2.0
yaw = 0.3

[pose.2]
x = -0.5
y = 0.1
z = 2.5

[apple]
iterations = 3
noise_mode = guard
attitude_chi = 0, 0, 0.3
attitude_kappa = 0, 0, 5

[ascent]
max_iterations = 50

[mcrb]
pseudotrue_method = grid

[baseline]
search_resolution = 0.005

[sweep]
variable = partitions
values = 1, 4, 16
trials = 3
estimators = apple, baseline
compute_bound = true
"""


def test_full_experiment_is_parsed():
    experiment = parse_experiment(EXPERIMENT)
    scenario = experiment.scenario
    assert scenario.num_ms == 2
    assert scenario.pattern == [(1, 1), (4, 1), (1, 4)]
    assert scenario.bs.nx == 16 and scenario.ms.ny == 4
    assert scenario.gains == [1.0, 0.5]
    assert scenario.poses[0].yaw == pytest.approx(0.3)
    assert scenario.poses[1].roll == 0.0
    assert math.isinf(scenario.rician_k_factor)

    assert experiment.apple.iterations == 3
    assert experiment.apple.noise_mode == "guard"
    assert experiment.apple.attitude_prior.kappa == (0.0, 0.0, 5.0)
    assert experiment.apple.ascent.max_iterations == 50
    assert experiment.mcrb.pseudotrue_method == "grid"
    assert experiment.baseline.search_resolution == 0.005

    sweep = experiment.sweep
    assert sweep.variable == SweepVariable.PARTITIONS
    assert sweep.values == ["1", "4", "16"]
    assert sweep.estimators == [EstimatorName.APPLE, EstimatorName.BASELINE]
    assert sweep.compute_bound is True
    assert sweep.scenario == scenario


def test_defaults_without_sections():
    experiment = parse_experiment("")
    assert experiment.scenario.pattern == "T5"
    assert experiment.scenario.poses is None
    assert experiment.sweep is None


def test_named_pattern_and_none_values():
    experiment = parse_experiment("[scenario]\npattern = t9\n[baseline]\nrange_prior = none\n")
    assert experiment.scenario.pattern == "T9"
    assert experiment.baseline.range_prior is None


@pytest.mark.parametrize("text, match", [
    ("[scenery]\nx = 1\n", "unknown sections"),
    ("[scenario]\nunknown_key = 1\n", "invalid configuration"),
    ("[pose.2]\nx = 0\ny = 0\nz = 2\n", "numbered"),
    ("[scenario]\npattern = 1:x\n", "malformed value"),
    ("[bs\nnx = 4\n", "cannot parse"),
    ("[scenario]\nnum_ms = 2\n[pose.1]\nx = 0\ny = 0\nz = 2\n", "invalid configuration"),
])
def test_bad_files_raise(text, match):
    with pytest.raises(ConfigurationError, match=match):
        parse_experiment(text)


def test_load_from_path(tmp_path):
    path = tmp_path / "experiment.ini"
    path.write_text(EXPERIMENT, encoding="utf-8")
    assert load_experiment(path).scenario.num_ms == 2
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_experiment(tmp_path / "missing.ini")
