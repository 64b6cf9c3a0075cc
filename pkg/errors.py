# errors.py - Exception hierarchy and exit codes for Ion Lifetime Twin
from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FIT_FAILURE = 3
EXIT_IO = 4


class LifetimeTwinError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = EXIT_VALIDATION


class DomainError(LifetimeTwinError, ValueError):
    """A physical quantity is outside the domain an operation accepts."""


class ConfigurationError(LifetimeTwinError, ValueError):
    """Invalid or inconsistent configuration.

    ``key`` names the offending setting and ``invariant`` the rule it broke,
    when known.
    """

    def __init__(self, message: str, key: Optional[str] = None, invariant: Optional[str] = None):
        self.key = key
        self.invariant = invariant
        self.detail = message
        parts = [message]
        if key:
            parts.insert(0, f"[{key}]")
        if invariant:
            parts.append(f"(violates: {invariant})")
        super().__init__(' '.join(parts))


class FileFormatError(LifetimeTwinError):
    """Malformed histogram, event or config file."""

    exit_code = EXIT_IO

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ''
        if path is not None:
            location = f"{path}"
            if line_number is not None:
                location += f":{line_number}"
            location += ': '
        elif line_number is not None:
            location = f"line {line_number}: "
        super().__init__(f"{location}{message}")


class ExtractionError(LifetimeTwinError):
    """Template matching could not reproduce the data's start-time scan."""

    exit_code = EXIT_FIT_FAILURE

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the command-line exit code."""
    if isinstance(error, LifetimeTwinError):
        return error.exit_code
    if isinstance(error, OSError):
        return EXIT_IO
    if isinstance(error, ValueError):
        return EXIT_VALIDATION
    return 1
