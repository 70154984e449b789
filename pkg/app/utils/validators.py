import math

from typing import Iterable, Optional

from app.exceptions.lab_errors import ParameterError

def validate_positive_int(value, name: str) -> int:
    """Validate an integer that must be at least one"""
    if isinstance(value, bool) or not isinstance(value, int):
        try:
            if float(value) != int(value):
                raise ValueError
            value = int(value)
        except (TypeError, ValueError):
            raise ParameterError(f"{name} must be an integer")
    if value < 1:
        raise ParameterError(f"{name} must be at least 1, got {value}")
    return value

def validate_nonnegative_int(value, name: str) -> int:
    """Validate an integer that may be zero"""
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParameterError(f"{name} must be an integer")
    if value < 0:
        raise ParameterError(f"{name} cannot be negative, got {value}")
    return value

def _as_finite_float(value, name: str) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ParameterError(f"{name} must be a number")
    if math.isnan(number):
        raise ParameterError(f"{name} cannot be NaN")
    return number

def validate_positive(value, name: str) -> float:
    """Validate a strictly positive real"""
    number = _as_finite_float(value, name)
    if number <= 0:
        raise ParameterError(f"{name} must be greater than 0, got {number}")
    return number

def validate_nonnegative(value, name: str) -> float:
    """Validate a real that may be zero"""
    number = _as_finite_float(value, name)
    if number < 0:
        raise ParameterError(f"{name} cannot be negative, got {number}")
    return number

def validate_fraction(value, name: str, upper: Optional[float] = 1.0) -> float:
    """Validate a real in the half-open interval (0, upper]"""
    number = _as_finite_float(value, name)
    if number <= 0 or (upper is not None and number > upper):
        raise ParameterError(f"{name} must lie in (0, {upper}], got {number}")
    return number

def validate_choice(value, name: str, choices: Iterable):
    """Validate that a value is one of the allowed choices"""
    allowed = list(choices)
    if value not in allowed:
        raise ParameterError(f"{name} must be one of {allowed}, got {value!r}")
    return value
