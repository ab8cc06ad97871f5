"""Custom exceptions for the near-field pose estimation toolkit"""

import functools
from typing import Optional

import numpy as np


class NearFieldError(Exception):
    """Base exception for the toolkit"""

    def __init__(self, message: str, details: Optional[str] = None):
        self.message = message
        self.details = details
        super().__init__(self.message)


class ConfigurationError(NearFieldError):
    """Configuration-related errors"""
    pass


class InvalidInputError(NearFieldError):
    """Rejected input to a numerical operation"""
    pass


class GeometryError(InvalidInputError):
    """Invalid indices, angles or degenerate geometry"""
    pass


class PartitionError(InvalidInputError):
    """BS array cannot be partitioned as requested"""
    pass


class ScenarioError(InvalidInputError):
    """Scenario violates a physical constraint"""
    pass


class NumericalError(NearFieldError):
    """Numerical failure inside an estimator or bound"""
    pass


class ConvergenceError(NumericalError):
    """Iterative solver did not converge"""
    pass


class ConditioningError(NumericalError):
    """Matrix too ill-conditioned to invert"""
    pass


class EstimationError(NearFieldError):
    """Estimator produced no usable result for a trial"""
    pass


def numerical_boundary(operation: str):
    """Re-raise stray numpy/scipy failures of an estimator or bound as NumericalError"""
    def decorate(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except NearFieldError:
                raise
            except np.linalg.LinAlgError as e:
                raise ConditioningError(f"{operation}: linear algebra failure", details=str(e)) from e
            except (ValueError, FloatingPointError, ZeroDivisionError) as e:
                raise NumericalError(f"{operation}: {e}", details=type(e).__name__) from e
        return wrapper
    return decorate
