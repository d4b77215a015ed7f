"""Exception hierarchy shared across magnetrec modules.

Module-specific errors subclass one of the categories below so the CLI can
map every failure onto a stable exit code.
"""

from __future__ import annotations


class MagnetError(Exception):
    """Base class for all magnetrec errors."""

    exit_code = 1


class InputNotFoundError(MagnetError):
    """Raised when a required input file or directory does not exist."""

    exit_code = 3

    def __init__(self, path: object, what: str = "input") -> None:
        self.path = path
        self.what = what
        super().__init__(f"Missing {what}: {path}")


class DataError(MagnetError):
    """Raised when interaction or feature data is malformed."""

    exit_code = 5


class GraphError(MagnetError):
    """Raised when graph construction parameters are invalid."""

    exit_code = 5


class ModelError(MagnetError):
    """Raised when model parameters or shapes are inconsistent."""

    exit_code = 5


class TrainingAbortedError(MagnetError):
    """Raised when training cannot continue (e.g. a non-finite loss)."""

    exit_code = 6

    def __init__(self, message: str, dump: dict[str, object] | None = None) -> None:
        self.dump = dump or {}
        super().__init__(message)
