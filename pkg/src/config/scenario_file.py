"""INI experiment file loader with strict section and key checking.

Sections: [scenario] [bs] [ms] [draw] [pose.N] [apple] [ascent] [mcrb] [baseline] [sweep].
Lists are comma separated; explicit transmit patterns are `q:s` pairs.
"""

import configparser
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

from pydantic import ValidationError

from ..core.exceptions import ConfigurationError
from ..models.schemas import (
    AppleConfig,
    AttitudePrior,
    BaselineOptions,
    McrbOptions,
    ScenarioConfig,
    SweepSpec,
)

logger = logging.getLogger(__name__)

FIXED_SECTIONS = {"scenario", "bs", "ms", "draw", "apple", "ascent", "mcrb", "baseline", "sweep"}
POSE_SECTION = re.compile(r"^pose\.(\d+)$")
NONE_VALUES = {"", "none", "null"}


@dataclass
class ExperimentFile:
    """Everything an experiment file configures"""
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    apple: AppleConfig = field(default_factory=AppleConfig)
    baseline: BaselineOptions = field(default_factory=BaselineOptions)
    mcrb: McrbOptions = field(default_factory=McrbOptions)
    sweep: Optional[SweepSpec] = None


def _items(parser: configparser.ConfigParser, section: str) -> Dict[str, Optional[str]]:
    if not parser.has_section(section):
        return {}
    return {key: (None if value.strip().lower() in NONE_VALUES else value.strip())
            for key, value in parser.items(section)}


def _split(value: str):
    return [v.strip() for v in value.split(",") if v.strip()]


def _pattern(value: str):
    if ":" not in value:
        return value
    pairs = []
    for item in _split(value):
        q, s = item.split(":")
        pairs.append((int(q), int(s)))
    return pairs


def _scenario(parser: configparser.ConfigParser) -> ScenarioConfig:
    data = _items(parser, "scenario")
    if data.get("pattern"):
        data["pattern"] = _pattern(data["pattern"])
    if data.get("gains"):
        data["gains"] = [float(v) for v in _split(data["gains"])]
    for name in ("bs", "ms", "draw"):
        if parser.has_section(name):
            data[name] = _items(parser, name)

    poses = {}
    for section in parser.sections():
        match = POSE_SECTION.match(section)
        if match:
            poses[int(match.group(1))] = _items(parser, section)
    if poses:
        if sorted(poses) != list(range(1, len(poses) + 1)):
            raise ConfigurationError("pose sections must be numbered 1..K", details=str(sorted(poses)))
        data["poses"] = [poses[n] for n in sorted(poses)]
    return ScenarioConfig.model_validate({k: v for k, v in data.items() if v is not None})


def _apple(parser: configparser.ConfigParser) -> AppleConfig:
    data = _items(parser, "apple")
    prior = {}
    for key in ("attitude_chi", "attitude_kappa"):
        if data.get(key):
            prior[key.split("_")[1]] = tuple(float(v) for v in _split(data.pop(key)))
        else:
            data.pop(key, None)
    if prior:
        data["attitude_prior"] = AttitudePrior.model_validate(prior)
    if parser.has_section("ascent"):
        data["ascent"] = _items(parser, "ascent")
    return AppleConfig.model_validate({k: v for k, v in data.items() if v is not None})


def parse_experiment(text: str, source: str = "<string>") -> ExperimentFile:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigurationError(f"cannot parse {source}", details=str(e))

    unknown = [s for s in parser.sections() if s not in FIXED_SECTIONS and not POSE_SECTION.match(s)]
    if unknown:
        raise ConfigurationError(f"unknown sections in {source}", details=", ".join(unknown))

    try:
        experiment = ExperimentFile(
            scenario=_scenario(parser),
            apple=_apple(parser),
            baseline=BaselineOptions.model_validate(
                {k: v for k, v in _items(parser, "baseline").items() if v is not None}),
            mcrb=McrbOptions.model_validate(
                {k: v for k, v in _items(parser, "mcrb").items() if v is not None}),
        )
        if parser.has_section("sweep"):
            data = _items(parser, "sweep")
            if data.get("values"):
                data["values"] = _split(data["values"])
            if data.get("estimators"):
                data["estimators"] = _split(data["estimators"])
            data.update(scenario=experiment.scenario, apple=experiment.apple,
                        baseline=experiment.baseline, mcrb=experiment.mcrb)
            experiment.sweep = SweepSpec.model_validate({k: v for k, v in data.items() if v is not None})
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration in {source}", details=str(e))
    except ValueError as e:
        raise ConfigurationError(f"malformed value in {source}", details=str(e))
    return experiment


def load_experiment(path: Union[str, Path]) -> ExperimentFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}", details=str(e))
    logger.debug(f"Loading experiment file {path}")
    return parse_experiment(text, source=str(path))
