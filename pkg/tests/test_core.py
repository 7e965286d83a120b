import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from reboundkit.core import (
    ApsState,
    BgCategory,
    InvalidInputError,
    SafeRange,
    Trace,
    clamp_cgm,
    classify,
)


@pytest.mark.parametrize(
    "bg, expected",
    [(69.9, BgCategory.HYPO), (70.0, BgCategory.IN_RANGE), (180.0, BgCategory.IN_RANGE), (180.1, BgCategory.HYPER)],
)
def test_classify_boundaries(bg, expected):
    assert classify(bg) is expected


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_classify_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        classify(bad)


@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6))
def test_classify_exhaustive(bg):
    c = classify(bg)
    assert (c is BgCategory.HYPO) == (bg < 70)
    assert (c is BgCategory.HYPER) == (bg > 180)
    assert (c is BgCategory.IN_RANGE) == (70 <= bg <= 180)


def test_safe_range_order():
    with pytest.raises(InvalidInputError):
        SafeRange(180, 70)
    assert classify(100, SafeRange(110, 200)) is BgCategory.HYPO


def test_clamp_cgm():
    np.testing.assert_array_equal(clamp_cgm([10, 100, 500]), [40, 100, 400])


def test_aps_state_invariants():
    ApsState(100, 0, 0, 0)
    with pytest.raises(InvalidInputError):
        ApsState(100, -1, 0, 0)
    with pytest.raises(InvalidInputError):
        ApsState(100, 0, 0, -5)


def _trace(n=5, **kw):
    d = dict(patient_id="p", start_epoch=0.0, bg=np.full(n, 120.0), basal=np.full(n, 1.2),
             bolus=np.zeros(n), iob=np.ones(n), carbs=np.zeros(n))
    d.update(kw)
    return Trace(**d)


def test_trace_validation_and_insulin():
    tr = _trace(bolus=[0, 2, 0, 0, 0])
    np.testing.assert_allclose(tr.insulin, [0.1, 2.1, 0.1, 0.1, 0.1])
    assert len(tr.states) == 5 and tr.states[1].insulin_dose == pytest.approx(2.1)
    with pytest.raises(InvalidInputError):
        _trace(n=0)
    with pytest.raises(InvalidInputError):
        _trace(true_bg=np.zeros(4))
    with pytest.raises(InvalidInputError):
        _trace(step_minutes=10)


def test_trace_is_immutable():
    tr = _trace()
    with pytest.raises(ValueError):
        tr.bg[0] = 1.0


def test_trace_slice_shifts_clock():
    tr = _trace(n=10, bg=np.arange(10.0) + 100)
    s = tr.slice(3, 6)
    assert len(s) == 3 and s.bg[0] == 103
    assert s.start_epoch == 3 * 300
