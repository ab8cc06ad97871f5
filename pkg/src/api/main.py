"""FastAPI application for near-field pose estimation runs"""

import logging
from typing import List

from fastapi import Depends, FastAPI, HTTPException, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from ..config.settings import settings
from ..core.exceptions import ConfigurationError, InvalidInputError, NearFieldError
from ..models.schemas import (
    BoundRequest,
    BoundResponse,
    ErrorResponse,
    EstimateRequest,
    EstimateResponse,
    HealthCheck,
    MetricRow,
    ServiceStats,
    SweepSpec,
)
from ..services.experiment_service import ExperimentService
from .dependencies import get_experiment_service, validate_sweep

logger = logging.getLogger(__name__)

# Create FastAPI app
app = FastAPI(
    title=settings.app_name,
    description="Near-field position and attitude estimation of multiple mobile stations",
    version=settings.app_version,
    docs_url="/docs",
    redoc_url="/redoc"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _error(status_code: int, error: str, details: str = None) -> JSONResponse:
    return JSONResponse(
        status_code=status_code,
        content=ErrorResponse(error=error, details=details).model_dump(mode="json"),
    )


@app.exception_handler(NearFieldError)
async def nearfield_exception_handler(request, exc: NearFieldError):
    """Rejected input maps to 400, numerical failures to 500"""
    if isinstance(exc, (InvalidInputError, ConfigurationError)):
        logger.warning(f"Rejected request: {exc.message}")
        return _error(status.HTTP_400_BAD_REQUEST, exc.message, exc.details)
    logger.error(f"Run failed: {exc.message}")
    return _error(status.HTTP_500_INTERNAL_SERVER_ERROR, exc.message, exc.details)


@app.exception_handler(Exception)
async def general_exception_handler(request, exc):
    """Global exception handler"""
    logger.error(f"Unhandled exception: {str(exc)}")
    return _error(
        status.HTTP_500_INTERNAL_SERVER_ERROR,
        "Internal server error",
        str(exc) if settings.debug else "An unexpected error occurred",
    )


@app.get("/", response_model=HealthCheck)
async def root():
    """Root endpoint with health check"""
    return HealthCheck(version=settings.app_version)


@app.get("/health", response_model=HealthCheck)
async def health_check():
    """Health check endpoint"""
    return HealthCheck(version=settings.app_version)


@app.post("/estimates", response_model=EstimateResponse, status_code=status.HTTP_201_CREATED)
def create_estimate(request: EstimateRequest, service: ExperimentService = Depends(get_experiment_service)):
    """Simulate one scene and run the requested estimators"""
    logger.info(f"Estimating {request.scenario.num_ms} MS pose(s) with {[e.value for e in request.estimators]}")
    return service.create_estimate(request)


@app.get("/estimates/{request_id}", response_model=EstimateResponse)
def get_estimate(request_id: str, service: ExperimentService = Depends(get_experiment_service)):
    """Get a previous estimate by ID"""
    result = service.get_estimate(request_id)
    if not result:
        raise HTTPException(status_code=404, detail="Estimate not found")
    return result


@app.post("/bounds", response_model=BoundResponse)
def compute_bounds(request: BoundRequest, service: ExperimentService = Depends(get_experiment_service)):
    """Misspecified CRB rows of one scene"""
    return service.compute_bounds(request)


@app.post("/sweeps", response_model=List[MetricRow])
def run_sweep(spec: SweepSpec = Depends(validate_sweep),
              service: ExperimentService = Depends(get_experiment_service)):
    """Run a Monte-Carlo sweep synchronously"""
    return service.run_sweep(spec, threads=1)


@app.get("/stats", response_model=ServiceStats)
async def get_service_stats(service: ExperimentService = Depends(get_experiment_service)):
    """Get service statistics"""
    return service.get_service_stats()


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "src.api.main:app",
        host=settings.api_host,
        port=settings.api_port,
        reload=settings.api_reload
    )
