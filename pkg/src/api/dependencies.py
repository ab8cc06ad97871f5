"""FastAPI dependencies for common functionality"""

import logging

from fastapi import HTTPException

from ..config.settings import settings
from ..models.schemas import SweepSpec
from ..services.experiment_service import ExperimentService, experiment_service

logger = logging.getLogger(__name__)


def get_experiment_service() -> ExperimentService:
    return experiment_service


def validate_sweep(spec: SweepSpec) -> SweepSpec:
    """Cap the work a single synchronous sweep request may ask for"""
    total = spec.trials * len(spec.values)
    if total > settings.api_max_sweep_trials:
        logger.warning(f"Rejected sweep of {total} trials")
        raise HTTPException(
            status_code=400,
            detail=f"Sweep asks for {total} trials; at most {settings.api_max_sweep_trials} allowed per request",
        )
    return spec
