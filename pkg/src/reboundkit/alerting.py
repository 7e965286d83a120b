"""Alert categorization over one hour of observed and one hour of predicted glucose."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .core import DEFAULT_RANGE, InvalidInputError, SafeRange

WINDOW_STEPS = 12
REARM_STEPS = 6

MESSAGES = {
    "predicted_high": "Your blood sugar is predicted to increase to 180 mg/dL in the next hour.",
    "rebound_high": (
        "You are predicted to have a rebound high in the next hour. "
        "Give a temp basal of {ib:.2f} U/hr once you are back in range."
    ),
    "predicted_low": "Your blood sugar is predicted to decrease to 70 mg/dL in the next hour.",
    "rebound_low": "You are predicted to have a rebound low in the next hour. Suspend insulin temporarily.",
    "no_alert": "",
}


class AlertKind(str, enum.Enum):
    PREDICTED_HIGH = "predicted_high"
    REBOUND_HIGH = "rebound_high"
    PREDICTED_LOW = "predicted_low"
    REBOUND_LOW = "rebound_low"
    NO_ALERT = "no_alert"


@dataclass(frozen=True)
class BgWindow:
    observed: np.ndarray  # steps t-11..t
    predicted: np.ndarray  # steps t+1..t+12

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=float)
        pred = np.asarray(self.predicted, dtype=float)
        if obs.shape != (WINDOW_STEPS,) or pred.shape != (WINDOW_STEPS,):
            raise InvalidInputError(
                f"window needs {WINDOW_STEPS} observed and {WINDOW_STEPS} predicted values, "
                f"got {obs.shape} and {pred.shape}"
            )
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "predicted", pred)


@dataclass(frozen=True)
class Alert:
    t_index: int
    kind: AlertKind
    ib: Optional[float] = None

    @property
    def message(self) -> str:
        return render(self.kind, self.ib)


def rebound_high_trigger(window: BgWindow, rng: SafeRange = DEFAULT_RANGE) -> int:
    """1 iff some observed value is below range and some later predicted value is above it.

    Every observed step precedes every predicted step, so the existential
    condition reduces to two independent tests.
    """
    return int(bool(np.any(window.observed < rng.low) and np.any(window.predicted > rng.high)))


def categorize(window: BgWindow, rng: SafeRange = DEFAULT_RANGE) -> AlertKind:
    obs_low = bool(np.any(window.observed < rng.low))
    obs_high = bool(np.any(window.observed > rng.high))
    pred_low = bool(np.any(window.predicted < rng.low))
    pred_high = bool(np.any(window.predicted > rng.high))
    if pred_high and obs_low:
        return AlertKind.REBOUND_HIGH
    if pred_low and obs_high:
        return AlertKind.REBOUND_LOW
    if pred_high:
        return AlertKind.PREDICTED_HIGH
    if pred_low:
        return AlertKind.PREDICTED_LOW
    return AlertKind.NO_ALERT


def render(kind: AlertKind, ib: Optional[float] = None) -> str:
    kind = AlertKind(kind)
    if kind is AlertKind.REBOUND_HIGH:
        if ib is None or not math.isfinite(ib):
            raise InvalidInputError("a rebound-high alert needs an increased basal value")
        return MESSAGES[kind.value].format(ib=ib)
    return MESSAGES[kind.value]


class AlertMonitor:
    """Streaming alert issuer.

    After a rebound-high alert fires, further rebound-high alerts are held back
    until the trigger has been clear for six consecutive steps. Other kinds are
    passed through unchanged (``NO_ALERT`` is never emitted).
    """

    def __init__(self, rearm_steps: int = REARM_STEPS, rng: SafeRange = DEFAULT_RANGE):
        self.rearm_steps = rearm_steps
        self.rng = rng
        self._armed = True
        self._clear_run = 0

    def update(self, t_index: int, window: BgWindow, ib_fn=None) -> Optional[Alert]:
        kind = categorize(window, self.rng)
        if kind is AlertKind.REBOUND_HIGH:
            self._clear_run = 0
            if not self._armed:
                return None
            self._armed = False
            return Alert(t_index, kind, ib_fn() if ib_fn is not None else None)
        self._clear_run += 1
        if self._clear_run >= self.rearm_steps:
            self._armed = True
        if kind is AlertKind.NO_ALERT:
            return None
        return Alert(t_index, kind)


def write_alert_log(alerts: Iterable[Alert], path, header_comment: Optional[str] = None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_index", "kind", "message", "ib_u_per_hr"])
        for a in alerts:
            w.writerow([a.t_index, a.kind.value, a.message, "" if a.ib is None else f"{a.ib:.2f}"])
