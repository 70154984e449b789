from functools import wraps
from typing import Callable, Optional, Tuple, Type

from app import logger
from app.exceptions.lab_errors import BatchRejectedError, ParameterError

def retry_on_rejection(max_attempts: int = 10,
                       retry_on: Tuple[Type[Exception], ...] = (BatchRejectedError,),
                       should_abort_retry: Optional[Callable[[Exception], bool]] = None) -> Callable:
    """
    Decorator that redraws a rejected sample
    The wrapped function receives the zero-based attempt number as the `attempt`
    keyword so it can derive a fresh seed for every redraw
    """
    if max_attempts <= 0:
        raise ParameterError("Maximum attempts must be greater than 0")

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            for attempt in range(max_attempts):
                try:
                    return func(*args, attempt=attempt, **kwargs)
                except retry_on as e:
                    logger.warning(f"Attempt {attempt + 1} of '{func.__name__}' rejected: {str(e)}")
                    if should_abort_retry and should_abort_retry(e):
                        logger.info("Aborting redraws based on condition.")
                        raise
                    if attempt == max_attempts - 1:
                        logger.error(f"All {max_attempts} attempts of '{func.__name__}' were rejected")
                        raise
        return wrapper
    return decorator
