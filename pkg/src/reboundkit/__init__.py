"""Rebound-high forecasting, alerting and increased-basal recommendation for closed-loop insulin therapy."""

__version__ = "0.1.0"

from .core import (
    ApsState,
    BgCategory,
    DataError,
    IntegrationError,
    InvalidInputError,
    ModelError,
    ReboundKitError,
    SafeRange,
    Trace,
    classify,
)

__all__ = [
    "ApsState",
    "BgCategory",
    "DataError",
    "IntegrationError",
    "InvalidInputError",
    "ModelError",
    "ReboundKitError",
    "SafeRange",
    "Trace",
    "classify",
]
