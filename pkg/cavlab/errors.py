"""Exception types shared across cavlab.

Each error carries the process exit code the CLI reports for it.
"""


class CavLabError(Exception):
    exit_code = 1


class ConfigError(CavLabError, ValueError):
    exit_code = 2


class MissingArtifactError(CavLabError, FileNotFoundError):
    exit_code = 3


class NumericError(CavLabError, RuntimeError):
    exit_code = 4


class PlacementError(NumericError):
    """Rejection sampling could not place an element without overlap."""


class OptimisationDiverged(NumericError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


class DimensionMismatch(CavLabError, ValueError):
    exit_code = 4


class UnknownConceptError(CavLabError, ValueError):
    exit_code = 2


class UnknownRegionError(CavLabError, ValueError):
    exit_code = 2


class UnknownLayerError(CavLabError, ValueError):
    exit_code = 2


class InvalidIndexError(CavLabError, IndexError):
    exit_code = 2


class SchemaVersionError(CavLabError, ValueError):
    exit_code = 2
