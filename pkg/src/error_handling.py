from typing import Optional, Dict, Any, Callable
import functools
import logging
import sys
import traceback
from datetime import datetime
from dataclasses import dataclass

logger = logging.getLogger(__name__)


@dataclass
class ErrorContext:
    error_type: str
    message: str
    timestamp: datetime
    trace: Optional[str] = None
    metadata: Optional[Dict[str, Any]] = None


class FaNetError(Exception):
    """Base class for pipeline errors. Each subclass maps to a stable exit code."""

    exit_code: int = 1
    kind: str = "error"


class ConfigError(FaNetError):
    """Invalid or unknown configuration."""

    exit_code = 1
    kind = "config"


class DataError(FaNetError):
    """Missing, empty or undecodable dataset input."""

    exit_code = 2
    kind = "data"


class ShapeMismatchError(DataError, ValueError):
    """Tensor extents do not agree."""

    kind = "shape"


class DetachedTensorError(FaNetError, ValueError):
    """backward() called on a tensor that was not produced on a tape."""

    exit_code = 3
    kind = "autodiff"


class NumericalError(FaNetError):
    """NaN/Inf produced or a non-finite loss encountered."""

    exit_code = 3
    kind = "numerical"


class IncompatibleCheckpointError(FaNetError):
    """Checkpoint parameters do not match the model."""

    exit_code = 4
    kind = "checkpoint"


class CorruptContainerError(IncompatibleCheckpointError):
    """Bad magic, version, truncation or CRC in a FANT container."""

    kind = "corrupt"


class GradientCheckError(FaNetError):
    """Analytic gradients disagree with finite differences."""

    exit_code = 5
    kind = "gradcheck"


def build_error_context(error: BaseException, **metadata: Any) -> ErrorContext:
    return ErrorContext(
        error_type=type(error).__name__,
        message=str(error),
        timestamp=datetime.now(),
        trace=traceback.format_exc(),
        metadata=metadata or None,
    )


def format_error_line(error: FaNetError) -> str:
    """One-line, machine-parsable reason for the error stream."""
    message = " ".join(str(error).split())
    return f"error kind={error.kind} code={error.exit_code} message={message}"


def with_error_handling(func: Callable[..., int]) -> Callable[..., int]:
    """Decorator for CLI commands: map pipeline errors to exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            return func(*args, **kwargs)
        except FaNetError as e:
            context = build_error_context(e, command=func.__name__)
            logger.error(f"Error in {func.__name__}: {str(e)}")
            logger.debug(f"Error context: {context}")
            print(format_error_line(e), file=sys.stderr)
            return e.exit_code

    return wrapper
