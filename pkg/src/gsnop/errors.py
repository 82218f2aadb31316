from __future__ import annotations

from typing import Any

import numpy as np


class GsnopError(Exception):
    """Base class of every error raised on purpose by this package."""


class ConfigError(GsnopError):
    pass


class DomainError(GsnopError):
    pass


class UsageError(GsnopError):
    pass


class DataError(GsnopError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrationError(GsnopError):
    """The solver gave up; `state` and `t` hold the last accepted point."""

    def __init__(self, message: str, state: np.ndarray, t: float) -> None:
        super().__init__(f"{message} (t={t:.6g})")
        self.state = state
        self.t = t


class DivergenceError(GsnopError):
    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} [{details}]"
        super().__init__(message)
