"""Exception classes shared by all services.

Every class carries the process exit code the CLI returns for it.
"""
from typing import Any, Dict, Optional


class OceanFuseError(Exception):
    exit_code = 1


class ConfigError(OceanFuseError, ValueError):
    """Invalid or inconsistent configuration"""
    exit_code = 2


class ArtifactIOError(OceanFuseError, IOError):
    """Missing, unreadable or corrupted artifact file"""
    exit_code = 3


class SchemaError(OceanFuseError, ValueError):
    """Shapes, channels or variables do not line up"""
    exit_code = 4


class DomainError(SchemaError):
    """Input outside the operation's domain (latitude range, negative sigma, ...)"""


class NumericalError(OceanFuseError, ArithmeticError):
    """Non-finite values or degenerate numerics"""
    exit_code = 5

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateInputError(NumericalError):
    """Nothing to compute over (no ocean cells, no usable rows)"""


class CoverageError(NumericalError):
    """A domain cell is covered by no patch"""


class StaleHashError(OceanFuseError):
    """An artifact was produced from a different configuration"""
    exit_code = 6
