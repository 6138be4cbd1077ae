"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """An array argument has the wrong shape; ``axis`` names the offender."""

    def __init__(self, axis: str, message: str):
        self.axis = axis
        super().__init__(f"{axis}: {message}")


class ConfigError(ValueError):
    """A configuration value violates its documented invariant."""


class DatasetError(Exception):
    """A dataset file or manifest is missing or malformed; carries the path."""

    def __init__(self, path: str, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class ReportError(ValueError):
    """Report input is empty or inconsistent."""
