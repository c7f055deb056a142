"""Exception hierarchy shared by every module."""

from __future__ import annotations


class CondLocError(Exception):
    """Base class for all library errors."""


class ShapeError(CondLocError, ValueError):
    pass


class GraphError(CondLocError, RuntimeError):
    pass


class NonFiniteError(CondLocError, FloatingPointError):
    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class DomainError(CondLocError, ValueError):
    """An input lies outside the domain of an operation."""


class DatasetError(CondLocError):
    pass


class MiningError(CondLocError):
    pass


class ConfigError(CondLocError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(CondLocError):
    pass


class ArtifactError(CondLocError):
    """A pipeline artifact is missing, stale or inconsistent."""
