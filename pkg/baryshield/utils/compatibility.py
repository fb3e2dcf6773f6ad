import importlib
import logging
import sys
from typing import Optional, Tuple

logger = logging.getLogger(__name__)

REQUIRED_PYTHON = (3, 8)
REQUIRED_PACKAGES = ("numpy", "scipy", "PIL")


def check_python_version() -> Tuple[bool, str]:
    """Check if the Python version is compatible"""
    if sys.version_info[:2] < REQUIRED_PYTHON:
        return False, f"Python {REQUIRED_PYTHON[0]}.{REQUIRED_PYTHON[1]} or higher is required"
    return True, "Python version is compatible"


def check_dependencies() -> Tuple[bool, str]:
    """Check if required dependencies are available"""
    for name in REQUIRED_PACKAGES:
        try:
            importlib.import_module(name)
        except ImportError as e:
            return False, f"Missing dependency: {str(e)}"
    return True, "All dependencies are available"


def check_float64() -> Tuple[bool, str]:
    """Check that numpy gives IEEE double precision"""
    import numpy as np

    if np.finfo(np.float64).eps > 1e-15:
        return False, "float64 machine epsilon is too coarse for the gradient checks"
    return True, "Double precision is available"


class BaryShieldError(Exception):
    """Base exception class for BaryShield"""
    pass


class CompatibilityError(BaryShieldError):
    """Raised when compatibility checks fail"""
    pass


class DependencyError(BaryShieldError):
    """Raised when required dependencies are missing"""
    pass


class InputError(BaryShieldError, ValueError):
    """Raised for malformed fields, shape or mass mismatches and bad rows"""
    pass


class ConfigurationError(BaryShieldError, ValueError):
    """Raised for invalid solver, attack or config-file values"""
    pass


class ConvergenceError(BaryShieldError, RuntimeError):
    """Raised when an iterative estimate misses its tolerance"""
    pass


class DivergenceError(BaryShieldError, RuntimeError):
    """Raised when a solver iterate stops being finite"""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class TrainingError(BaryShieldError, RuntimeError):
    """Raised when the training loss stops being finite"""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class DatasetError(BaryShieldError, OSError):
    """Raised for unreadable datasets, label files and checkpoints"""
    pass


class ImageFormatError(InputError):
    """Raised when a PGM/PPM file cannot be parsed"""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def run_compatibility_checks() -> Optional[str]:
    """Run all compatibility checks and return error message if any check fails"""
    checks = [
        check_python_version,
        check_dependencies,
        check_float64,
    ]

    for check in checks:
        is_compatible, message = check()
        if not is_compatible:
            return message
        logger.debug("✓ %s", message)

    return None


def ensure_compatible() -> None:
    """Raise DependencyError for a missing package, CompatibilityError for any other failed check"""
    ok, message = check_dependencies()
    if not ok:
        raise DependencyError(message)
    error = run_compatibility_checks()
    if error:
        raise CompatibilityError(error)


def handle_error(error: Exception) -> str:
    """Log an error by kind and return the one-line message shown to the user"""
    if isinstance(error, CompatibilityError):
        message = f"Compatibility Error: {error}"
    elif isinstance(error, DependencyError):
        message = f"Dependency Error: {error}"
    elif isinstance(error, DivergenceError):
        message = f"Divergence Error at iteration {error.iteration}: {error}"
    elif isinstance(error, ConfigurationError):
        message = f"Configuration Error: {error}"
    elif isinstance(error, (InputError, DatasetError)):
        message = f"Input Error: {error}"
    elif isinstance(error, BaryShieldError):
        message = f"Error: {error}"
    else:
        message = f"Unexpected Error: {error}"
    logger.error(message)
    return message
