"""
Error hierarchy

Every error carries the process exit code the CLI reports for it:
0 ok, 1 usage, 2 validation, 3 runtime.
"""
from typing import Any, Optional, Sequence


class GradShieldError(Exception):
    """Base class for all library errors"""

    exit_code = 3

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigurationError(GradShieldError):
    """Inputs are inconsistent (dimensions, indices, empty batches)"""

    exit_code = 2


class ConfigParseError(ConfigurationError):
    """Experiment file could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigValidationError(ConfigurationError):
    """A configuration field holds an invalid value or is unknown"""

    def __init__(self, field: str, message: str, suggestion: Optional[str] = None):
        text = f"{field}: {message}"
        if suggestion:
            text += f" (did you mean '{suggestion}'?)"
        super().__init__(text)
        self.field = field
        self.suggestion = suggestion


class NumericError(GradShieldError):
    """A computation produced non-finite values"""

    def __init__(self, message: str, index: Optional[Sequence[int]] = None):
        if index is not None:
            message = f"{message} at index {tuple(int(i) for i in index)}"
        super().__init__(message)
        self.index = index


class UndefinedFisherError(GradShieldError):
    """Fisher information requested for a noiseless (σ = 0) channel"""


class IngestionError(GradShieldError):
    """A dataset file could not be read"""

    def __init__(self, path: Any, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TrainingAbortedError(GradShieldError):
    """Training stopped early; the partial run log is attached"""

    def __init__(self, message: str, run_log: Any = None):
        super().__init__(message)
        self.run_log = run_log


class ArtifactExistsError(GradShieldError):
    """Output directory already holds a run with the same configuration"""

    exit_code = 1


class ArtifactLockedError(GradShieldError):
    """Another experiment process holds the output directory"""

    exit_code = 1
