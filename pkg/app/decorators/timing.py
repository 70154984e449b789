import logging
import time

from functools import wraps
from typing import Callable, Optional

from app import logger

def timing(name: Optional[str] = None, level: int = logging.INFO) -> Callable:
    """Log how long a lab operation takes, including calls that raise."""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            outcome = "completed"
            try:
                return func(*args, **kwargs)
            except Exception:
                outcome = "failed"
                raise
            finally:
                elapsed_ms = (time.perf_counter() - start_time) * 1000
                logger.log(
                    level,
                    f"Operation '{name or func.__name__}' {outcome} in {elapsed_ms:.2f}ms"
                )
        return wrapper
    return decorator
