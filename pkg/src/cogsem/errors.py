"""
Error hierarchy shared by every cogsem module.

Each error carries a ``category`` (reported by the CLI) and the process ``exit_code``
the CLI returns for it.
"""

from __future__ import annotations

from typing import List, Optional, Sequence


class CoGSEMError(Exception):
    category = "error"
    exit_code = 1


class ContractError(CoGSEMError, ValueError):
    """A precondition of an operation does not hold."""

    category = "contract"
    exit_code = 6


class ShapeError(ContractError):
    category = "shape"


class NumericError(ContractError):
    category = "numeric"


class LoadError(CoGSEMError, OSError):
    """A referenced file is missing or unreadable."""

    category = "load"
    exit_code = 4

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class ManifestValidationError(CoGSEMError, ValueError):
    """A dataset manifest breaks one of its invariants."""

    category = "validation"
    exit_code = 5

    def __init__(self, message: str, items: Sequence[str] = ()):
        super().__init__(message)
        self.items: List[str] = list(items)


class DependencyError(CoGSEMError):
    """A prerequisite artifact (usually a stage checkpoint) does not exist."""

    category = "dependency"
    exit_code = 3


class ConfigError(CoGSEMError, ValueError):
    """Schema or cross-field violation; ``issues`` holds (key_path, message) pairs."""

    category = "config"
    exit_code = 2

    def __init__(self, message: str, issues: Sequence[tuple] = ()):
        super().__init__(message)
        self.issues = list(issues)

    def __str__(self) -> str:
        if not self.issues:
            return super().__str__()
        lines = [super().__str__()]
        lines += [f"  {path or '<root>'}: {msg}" for path, msg in self.issues]
        return "\n".join(lines)
