"""Increased-basal (IB) recommendation by counterfactual forecasting over a fixed delta grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .alerting import WINDOW_STEPS, BgWindow, rebound_high_trigger
from .core import DEFAULT_RANGE, InvalidInputError, SafeRange, Trace
from .forecaster import STEPS_PER_HOUR, Forecaster, predict_horizon


@dataclass(frozen=True)
class DeltaGrid:
    candidates: Tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(11))

    def __post_init__(self):
        c = tuple(float(x) for x in self.candidates)
        object.__setattr__(self, "candidates", c)
        if not c or c[0] != 0.0:
            raise InvalidInputError("delta grid must start at 0")
        if any(x < 0 for x in c) or any(b <= a for a, b in zip(c, c[1:])):
            raise InvalidInputError("delta grid must be non-negative and strictly increasing")

    @classmethod
    def parse(cls, text: str) -> "DeltaGrid":
        """Parse ``"start:step:stop"`` (inclusive) or a comma-separated list."""
        text = text.strip()
        if ":" in text:
            try:
                a, s, b = (float(x) for x in text.split(":"))
            except ValueError:
                raise InvalidInputError(f"bad delta grid {text!r}; expected start:step:stop") from None
            if s <= 0:
                raise InvalidInputError("delta grid step must be > 0")
            k = int(np.floor((b - a) / s + 1e-9))
            return cls(tuple(round(a + i * s, 10) for i in range(k + 1)))
        try:
            return cls(tuple(float(x) for x in text.split(",")))
        except ValueError:
            raise InvalidInputError(f"bad delta grid {text!r}") from None


@dataclass
class IbRecommendation:
    ib: float
    delta: float
    predicted_out_of_range_steps: int
    induced_hypo: bool
    start_index: Optional[int] = None
    evaluations: Dict[float, Tuple[int, bool]] = field(default_factory=dict)
    predictions: Dict[float, np.ndarray] = field(default_factory=dict)


def out_of_range_steps(pred, rng: SafeRange = DEFAULT_RANGE) -> int:
    """Predicted steps not strictly inside (low, high)."""
    pred = np.asarray(pred)
    return int(np.count_nonzero((pred <= rng.low) | (pred >= rng.high)))


def recommend_ib(
    model: Forecaster,
    trace: Trace,
    t: int,
    grid: DeltaGrid = DeltaGrid(),
    profile=None,
    rng: SafeRange = DEFAULT_RANGE,
    require_trigger: bool = True,
) -> IbRecommendation:
    """Pick the basal increment that minimizes predicted out-of-range steps without a predicted low.

    The increment starts at the first predicted step back inside [70, 180]
    under the unchanged basal. Forecast steps before that point are identical
    for every candidate, so the hypoglycemia screen covers the steps from
    there on. Ties go to the smaller increment; if every positive increment
    is screened out, delta 0 is returned.
    """
    m = model.config.m_horizon_steps
    r_t = float(trace.basal[t]) if profile is None else float(profile.basal_rate)
    base = np.full(max(m - 1, 0), (r_t - float(trace.basal[t])) / STEPS_PER_HOUR)

    pred0 = predict_horizon(model, trace, t, base).predicted_bg
    if require_trigger:
        if t < WINDOW_STEPS - 1 or m != WINDOW_STEPS:
            raise InvalidInputError("IB recommendation needs a full hour of observations and a one-hour forecast")
        window = BgWindow(trace.bg[t - WINDOW_STEPS + 1 : t + 1], pred0)
        if not rebound_high_trigger(window, rng):
            raise InvalidInputError(f"no rebound high is predicted at step {t}")

    in_range = np.nonzero((pred0 >= rng.low) & (pred0 <= rng.high))[0]
    score0 = out_of_range_steps(pred0, rng)
    if len(in_range) == 0:
        return IbRecommendation(r_t, 0.0, score0, False, None, {0.0: (score0, False)}, {0.0: pred0})
    start = int(in_range[0])

    evaluations, predictions = {}, {}
    for delta in grid.candidates:
        if delta == 0.0:
            pred = pred0
        else:
            extra = base.copy()
            extra[start:] += delta / STEPS_PER_HOUR
            pred = predict_horizon(model, trace, t, extra).predicted_bg
        evaluations[delta] = (out_of_range_steps(pred, rng), bool(np.any(pred[start:] < rng.low)))
        predictions[delta] = pred

    safe = [d for d in grid.candidates if not evaluations[d][1]]
    if not any(d > 0 for d in safe):
        best = 0.0
    else:
        best = min(safe, key=lambda d: (evaluations[d][0], d))
    score, hypo = evaluations[best]
    return IbRecommendation(round(r_t + best, 10), best, score, hypo, start, evaluations, predictions)
