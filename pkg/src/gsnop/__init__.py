"""Graph sequential neural ODE processes for link prediction on sparse dynamic graphs."""

from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    DomainError,
    GsnopError,
    IntegrationError,
    UsageError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "DomainError",
    "GsnopError",
    "IntegrationError",
    "UsageError",
]
