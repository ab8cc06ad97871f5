"""Command-line entry point: simulate, estimate, baseline, bound and sweep"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ..config.scenario_file import ExperimentFile, load_experiment
from ..config.settings import settings
from ..core.channel import ReceivedSignal, dump_signal, load_signal, scenario_poses
from ..core.exceptions import ConfigurationError, InvalidInputError, NearFieldError, NumericalError
from ..core.logging_config import format_flags, setup_logging
from ..core.mcrb import compute_bound
from ..models.schemas import EstimatorName
from ..services.experiment_service import (
    SimulatedScene,
    bound_records,
    experiment_service,
    match_estimates,
    partition_for,
    pose_records,
    run_estimator,
)
from ..services.reporting import write_bounds_csv, write_metrics_csv, write_metrics_svg, write_poses_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nearfield-pae",
        description="Near-field multi-MS position and attitude estimation experiments",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, help="INI experiment file")
        sub.add_argument("--seed", type=int, default=None, help="Base seed (default from settings)")
        sub.add_argument("--out", type=Path, default=None, help="Output path (stdout when omitted for CSV)")
        return sub

    simulate = common("simulate", "Simulate one scene and dump its received signal")
    simulate.add_argument("--truth", type=Path, default=None, help="Write the true poses as CSV")
    for name, help_text in (("estimate", "Run APPLE on a given or simulated signal"),
                            ("baseline", "Run the far-field baseline on a given or simulated signal")):
        sub = common(name, help_text)
        sub.add_argument("--signal", type=Path, default=None, help="Signal dump to estimate from")
    common("bound", "Misspecified CRB of one scene")
    sweep = common("sweep", "Monte-Carlo sweep defined by the [sweep] section")
    sweep.add_argument("--threads", type=int, default=None, help="Worker processes")
    sweep.add_argument("--svg", action="store_true", help="Also write an SVG chart next to --out")
    return parser


def _experiment(args) -> ExperimentFile:
    return load_experiment(args.config) if args.config else ExperimentFile()


def _emit(text: str):
    sys.stdout.write(text)
    sys.stdout.flush()


def cmd_simulate(args, experiment: ExperimentFile, seed: int) -> int:
    scene = experiment_service.simulate(experiment.scenario, seed)
    out = args.out or settings.results_dir / "signal.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_signal(out, ReceivedSignal(scene.signal.samples, seed=seed))
    logger.info(f"Wrote signal dump {out}")
    text = write_poses_csv(pose_records(scene.poses), args.truth)
    if args.truth is None:
        _emit(text)
    return EXIT_OK


def cmd_estimate(args, experiment: ExperimentFile, seed: int, estimator: EstimatorName) -> int:
    scenario = experiment.scenario
    if args.signal is not None:
        truths = scenario_poses(scenario) if scenario.poses is not None else None
        scene = SimulatedScene(scenario, partition_for(scenario), truths or [], load_signal(args.signal))
    else:
        guard = experiment.apple.guard_samples if experiment.apple.noise_mode == "guard" else 0
        scene = experiment_service.simulate(scenario, seed, guard)
        truths = scene.poses
    estimates, flags = run_estimator(estimator, scene, experiment.apple, experiment.baseline)
    if flags:
        logger.warning(f"{estimator.value} flags: {format_flags(flags)}")
    truths = truths or None
    if truths:
        estimates = match_estimates(estimates, truths)
    text = write_poses_csv(pose_records(estimates, truths), args.out)
    if args.out is None:
        _emit(text)
    return EXIT_OK


def cmd_bound(args, experiment: ExperimentFile, seed: int) -> int:
    scene = experiment_service.simulate(experiment.scenario, seed)
    result = compute_bound(scene.scenario, scene.plan, scene.poses, experiment.mcrb)
    if result.flags:
        logger.warning(f"bound flags: {format_flags(result.flags)}")
    text = write_bounds_csv(bound_records(result), args.out)
    if args.out is None:
        _emit(text)
    return EXIT_OK


def cmd_sweep(args, experiment: ExperimentFile, seed: Optional[int]) -> int:
    if experiment.sweep is None:
        raise ConfigurationError("the sweep command needs a [sweep] section")
    spec = experiment.sweep
    if seed is not None:
        spec = spec.model_copy(update={"base_seed": seed})
    rows = experiment_service.run_sweep(spec, args.threads)
    text = write_metrics_csv(rows, args.out)
    if args.out is None:
        _emit(text)
    if args.svg:
        svg_path = args.out.with_suffix(".svg") if args.out else settings.results_dir / "sweep.svg"
        write_metrics_svg(rows, svg_path)
    attempted = spec.trials
    if any(row.failed * 2 > attempted for row in rows):
        logger.error("Numerical failures in the majority of trials at some sweep point")
        return EXIT_NUMERICAL
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("DEBUG" if args.verbose else None)
    try:
        experiment = _experiment(args)
        seed = args.seed if args.seed is not None else settings.default_seed
        if args.command == "simulate":
            return cmd_simulate(args, experiment, seed)
        if args.command == "estimate":
            return cmd_estimate(args, experiment, seed, EstimatorName.APPLE)
        if args.command == "baseline":
            return cmd_estimate(args, experiment, seed, EstimatorName.BASELINE)
        if args.command == "bound":
            return cmd_bound(args, experiment, seed)
        return cmd_sweep(args, experiment, args.seed)
    except (ConfigurationError, InvalidInputError) as e:
        logger.error(f"{e.message}" + (f": {e.details}" if e.details else ""))
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error(f"Numerical failure: {e.message}")
        return EXIT_NUMERICAL
    except NearFieldError as e:
        logger.error(f"Run failed: {e.message}")
        return EXIT_NUMERICAL
