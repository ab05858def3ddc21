import logging
import sys
from datetime import datetime
from typing import Optional, Dict, Any
from pathlib import Path
import json
from functools import wraps

from config import settings


class EPSRLogger:
    """Structured logging for the super-resolution laboratory."""

    def __init__(self, name: str = "epsr", log_level: str = settings.LOG_LEVEL):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))

        # Prevent duplicate handlers
        if not self.logger.handlers:
            self._setup_handlers()

    def _setup_handlers(self):
        """Setup console and file handlers with proper formatting."""

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(logging.INFO)
        console_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        console_handler.setFormatter(console_formatter)
        self.logger.addHandler(console_handler)

        if not settings.LOG_TO_FILE:
            return

        log_dir = Path(settings.LOG_DIR)
        log_dir.mkdir(parents=True, exist_ok=True)

        file_handler = logging.FileHandler(
            log_dir / f"epsr_{datetime.now().strftime('%Y%m%d')}.log"
        )
        file_handler.setLevel(logging.DEBUG)
        file_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        file_handler.setFormatter(file_formatter)
        self.logger.addHandler(file_handler)

        error_handler = logging.FileHandler(
            log_dir / f"epsr_errors_{datetime.now().strftime('%Y%m%d')}.log"
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(file_formatter)
        self.logger.addHandler(error_handler)

    @staticmethod
    def _format(message: str, fields: Dict[str, Any]) -> str:
        if fields:
            return f"{message} | {json.dumps(fields, default=str)}"
        return message

    def info(self, message: str, **kwargs):
        """Log info message with optional structured data."""
        self.logger.info(self._format(message, kwargs))

    def debug(self, message: str, **kwargs):
        """Log debug message with optional structured data."""
        self.logger.debug(self._format(message, kwargs))

    def warning(self, message: str, **kwargs):
        """Log warning message with optional structured data."""
        self.logger.warning(self._format(message, kwargs))

    def error(self, message: str, error: Optional[Exception] = None, **kwargs):
        """Log error message with optional exception and structured data."""
        if error:
            kwargs['error_type'] = type(error).__name__
            kwargs['error_message'] = str(error)
        self.logger.error(self._format(message, kwargs), exc_info=error is not None)

    def critical(self, message: str, error: Optional[Exception] = None, **kwargs):
        """Log critical message with optional exception and structured data."""
        if error:
            kwargs['error_type'] = type(error).__name__
            kwargs['error_message'] = str(error)
        self.logger.critical(self._format(message, kwargs), exc_info=error is not None)


# Global logger instance
logger = EPSRLogger()


def log_execution_time(func):
    """Decorator to log function execution time."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = datetime.now()
        try:
            result = func(*args, **kwargs)
            execution_time = (datetime.now() - start_time).total_seconds()
            logger.debug(
                f"Function {func.__name__} completed successfully",
                execution_time_seconds=execution_time
            )
            return result
        except Exception as e:
            execution_time = (datetime.now() - start_time).total_seconds()
            logger.error(
                f"Function {func.__name__} failed",
                error=e,
                execution_time_seconds=execution_time
            )
            raise
    return wrapper


class EPSRError(Exception):
    """Base exception for the laboratory."""
    pass


class ConfigurationError(EPSRError):
    """Invalid configuration or incompatible shapes."""
    def __init__(self, message: str, field: Optional[str] = None, value: Any = None):
        super().__init__(message)
        self.field = field
        self.value = value


class UsageError(EPSRError):
    """A caller violated an operation's precondition."""
    def __init__(self, message: str, argument: Optional[str] = None):
        super().__init__(message)
        self.argument = argument


class NumericError(EPSRError):
    """NaN/Inf produced, or a value outside its numeric domain."""
    def __init__(self, message: str, op: Optional[str] = None, layer: Optional[str] = None):
        super().__init__(message)
        self.op = op
        self.layer = layer


class CheckpointError(EPSRError):
    """Archive could not be written, read or matched."""
    def __init__(self, message: str, path: Optional[str] = None, entry: Optional[str] = None):
        super().__init__(message)
        self.path = path
        self.entry = entry


class ImageIOError(EPSRError):
    """PNG decoding/encoding errors."""
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class FittingError(EPSRError):
    """Statistical model could not be fitted."""
    def __init__(self, message: str, counts: Optional[Dict[str, int]] = None):
        super().__init__(message)
        self.counts = counts or {}


class TrainingAborted(NumericError):
    """Training stopped on a non-finite loss."""
    def __init__(self, message: str, iteration: int, checkpoint: Optional[str] = None):
        super().__init__(message, op="loss")
        self.iteration = iteration
        self.checkpoint = checkpoint
