"""Shared domain types, units and glucose range predicates.

All glucose values are mg/dL, insulin is in units (U), basal rates in U/hr
and carbohydrates in grams. One APS step is five minutes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

STEP_MINUTES = 5
CGM_MIN = 40.0
CGM_MAX = 400.0


class ReboundKitError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ReboundKitError, ValueError):
    pass


class DataError(ReboundKitError):
    """Malformed or inconsistent input data (CSV rows, gaps, missing channels)."""


class IntegrationError(ReboundKitError, ArithmeticError):
    pass


class ModelError(ReboundKitError, ArithmeticError):
    """Non-finite values or shape problems inside the forecasting model."""


class BgCategory(enum.Enum):
    HYPO = "hypo"
    IN_RANGE = "in_range"
    HYPER = "hyper"


@dataclass(frozen=True)
class SafeRange:
    low: float = 70.0
    high: float = 180.0

    def __post_init__(self):
        if not self.low < self.high:
            raise InvalidInputError(f"safe range needs low < high, got {self.low}..{self.high}")


DEFAULT_RANGE = SafeRange()


def classify(bg: float, rng: SafeRange = DEFAULT_RANGE) -> BgCategory:
    """Classify one glucose value. Boundary values (exactly 70 or 180) are in range."""
    bg = float(bg)
    if not math.isfinite(bg):
        raise InvalidInputError(f"glucose must be finite, got {bg!r}")
    if bg < rng.low:
        return BgCategory.HYPO
    if bg > rng.high:
        return BgCategory.HYPER
    return BgCategory.IN_RANGE


def clamp_cgm(values):
    """Clamp CGM readings to the sensor reporting limits [40, 400] mg/dL."""
    return np.clip(values, CGM_MIN, CGM_MAX)


@dataclass(frozen=True)
class ApsState:
    """One 5-minute closed-loop sample."""

    bg: float
    insulin_dose: float
    iob: float
    carbs: float

    def __post_init__(self):
        if not math.isfinite(self.bg):
            raise InvalidInputError("bg must be finite")
        for name in ("insulin_dose", "iob", "carbs"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v!r}")


def _frozen(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trace:
    """Chronologically ordered APS samples for one patient.

    Channels are stored column-wise as read-only float64 arrays. ``insulin``
    is the total dose delivered in each step (basal/12 + bolus); ``basal`` is
    the programmed basal rate in U/hr at each step.
    """

    patient_id: str
    start_epoch: float
    bg: np.ndarray
    basal: np.ndarray
    bolus: np.ndarray
    iob: np.ndarray
    carbs: np.ndarray
    true_bg: Optional[np.ndarray] = None
    step_minutes: int = field(default=STEP_MINUTES)

    def __post_init__(self):
        if self.step_minutes != STEP_MINUTES:
            raise InvalidInputError(f"step_minutes is fixed at {STEP_MINUTES}")
        names = ("bg", "basal", "bolus", "iob", "carbs")
        for name in names:
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        n = len(self.bg)
        if n == 0:
            raise InvalidInputError("a trace needs at least one state")
        for name in names[1:]:
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"channel {name} has length {len(getattr(self, name))}, expected {n}")
        if self.true_bg is not None:
            tb = _frozen(self.true_bg, "true_bg")
            if len(tb) != n:
                raise InvalidInputError("true_bg must have the same length as bg")
            object.__setattr__(self, "true_bg", tb)
        if not np.all(np.isfinite(self.bg)):
            raise InvalidInputError("bg contains non-finite values")
        for name in names[1:]:
            arr = getattr(self, name)
            if not (np.all(np.isfinite(arr)) and np.all(arr >= 0)):
                raise InvalidInputError(f"{name} must be finite and >= 0")

    def __len__(self) -> int:
        return len(self.bg)

    @property
    def insulin(self) -> np.ndarray:
        return self.basal / (60.0 / self.step_minutes) + self.bolus

    @property
    def states(self) -> list[ApsState]:
        ins = self.insulin
        return [
            ApsState(float(self.bg[i]), float(ins[i]), float(self.iob[i]), float(self.carbs[i]))
            for i in range(len(self))
        ]

    def timestamps(self) -> np.ndarray:
        return self.start_epoch + 60.0 * self.step_minutes * np.arange(len(self))

    def slice(self, start: int, stop: int) -> "Trace":
        if not 0 <= start < stop <= len(self):
            raise InvalidInputError(f"bad slice {start}:{stop} of trace with {len(self)} steps")
        return Trace(
            patient_id=self.patient_id,
            start_epoch=self.start_epoch + 60.0 * self.step_minutes * start,
            bg=self.bg[start:stop],
            basal=self.basal[start:stop],
            bolus=self.bolus[start:stop],
            iob=self.iob[start:stop],
            carbs=self.carbs[start:stop],
            true_bg=None if self.true_bg is None else self.true_bg[start:stop],
        )

    def replace(self, **changes) -> "Trace":
        kw = dict(
            patient_id=self.patient_id,
            start_epoch=self.start_epoch,
            bg=self.bg,
            basal=self.basal,
            bolus=self.bolus,
            iob=self.iob,
            carbs=self.carbs,
            true_bg=self.true_bg,
        )
        kw.update(changes)
        return Trace(**kw)


def concat_channel(traces: Sequence[Trace], name: str) -> np.ndarray:
    return np.concatenate([getattr(t, name) for t in traces])
