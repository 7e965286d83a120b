"""Trace CSV I/O, carb splitting, rebound-high labeling and train/test splitting."""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from .core import STEP_MINUTES, DataError, InvalidInputError, Trace

CSV_COLUMNS = (
    "timestamp_iso8601",
    "bg_cgm_mgdl",
    "true_bg_mgdl",
    "basal_u_per_hr",
    "bolus_u",
    "iob_u",
    "carbs_g",
)
REQUIRED = ("timestamp_iso8601", "bg_cgm_mgdl", "basal_u_per_hr", "bolus_u", "iob_u", "carbs_g")
REBOUND_WINDOW_STEPS = 24
CARB_RATE = 5.0


class GapError(DataError):
    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class CarbTruncationWarning(UserWarning):
    def __init__(self, message: str, grams: float):
        super().__init__(message)
        self.grams = grams


# --------------------------------------------------------------------------- CSV


def format_timestamp(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> float:
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _num(v: float) -> str:
    return f"{v:.6f}".rstrip("0").rstrip(".") if math.isfinite(v) else ""


def write_trace_csv(traces: Union[Trace, Sequence[Trace]], out: Union[str, Path, TextIO], header_comment: Optional[str] = None):
    """Write one or more traces (e.g. the runs of one patient) to a single CSV."""
    if isinstance(traces, Trace):
        traces = [traces]
    own = isinstance(out, (str, Path))
    fh = open(out, "w", newline="", encoding="utf-8") if own else out
    try:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for tr in traces:
            ts = tr.timestamps()
            for i in range(len(tr)):
                w.writerow(
                    [
                        format_timestamp(ts[i]),
                        _num(tr.bg[i]),
                        "" if tr.true_bg is None else _num(tr.true_bg[i]),
                        _num(tr.basal[i]),
                        _num(tr.bolus[i]),
                        _num(tr.iob[i]),
                        _num(tr.carbs[i]),
                    ]
                )
    finally:
        if own:
            fh.close()


def _read_rows(source, patient_id: Optional[str]):
    if isinstance(source, (str, Path)):
        path = Path(source)
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
        pid = patient_id or path.stem
    else:
        text = source.read()
        pid = patient_id or "patient"
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty CSV: header row missing") from None
    header = [h.strip() for h in header]
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise DataError(f"CSV header is missing column(s): {', '.join(missing)}")
    col = {name: header.index(name) for name in CSV_COLUMNS}

    epochs, values, errors = [], [], []
    for rowno, row in enumerate(reader, start=1):
        if not any(cell.strip() for cell in row):
            continue
        rec = {}
        try:
            epochs.append(parse_timestamp(row[col["timestamp_iso8601"]]))
        except (ValueError, IndexError):
            errors.append(f"row {rowno}: bad or missing timestamp")
            continue
        for name in CSV_COLUMNS[1:]:
            cell = row[col[name]].strip() if col[name] < len(row) else ""
            if cell == "" and name == "true_bg_mgdl":
                rec[name] = None
                continue
            try:
                v = float(cell)
            except ValueError:
                errors.append(f"row {rowno}: column {name} is not a number ({cell!r})")
                break
            if not math.isfinite(v):
                errors.append(f"row {rowno}: column {name} is not finite ({cell!r})")
                break
            if name != "bg_cgm_mgdl" and name != "true_bg_mgdl" and v < 0:
                errors.append(f"row {rowno}: column {name} is negative")
                break
            rec[name] = v
        else:
            values.append(rec)
            continue
        epochs.pop()
    if errors:
        raise DataError("; ".join(errors))
    if not values:
        raise DataError("CSV has no data rows")
    return pid, np.asarray(epochs), values


def _build(pid: str, epochs: np.ndarray, values: list) -> Trace:
    tb = [v["true_bg_mgdl"] for v in values]
    has_true = all(x is not None for x in tb)
    if not has_true and any(x is not None for x in tb):
        raise DataError("true_bg_mgdl must be given on every row or on none")
    return Trace(
        patient_id=pid,
        start_epoch=float(epochs[0]),
        bg=[v["bg_cgm_mgdl"] for v in values],
        basal=[v["basal_u_per_hr"] for v in values],
        bolus=[v["bolus_u"] for v in values],
        iob=[v["iob_u"] for v in values],
        carbs=[v["carbs_g"] for v in values],
        true_bg=tb if has_true else None,
    )


def _gaps(epochs: np.ndarray) -> np.ndarray:
    """Row indices i where the step from i-1 to i is not exactly 5 minutes."""
    d = np.diff(epochs)
    if np.any(d <= 0):
        i = int(np.argmax(d <= 0)) + 1
        raise DataError(f"timestamps are not strictly increasing at index {i}")
    return np.nonzero(d != 60.0 * STEP_MINUTES)[0] + 1


def parse_trace_csv(source, patient_id: Optional[str] = None) -> Trace:
    """Read a strictly uniform trace CSV. Any timing gap raises :class:`GapError`."""
    pid, epochs, values = _read_rows(source, patient_id)
    gaps = _gaps(epochs)
    if len(gaps):
        i = int(gaps[0])
        raise GapError(
            f"non-uniform sampling at index {i}: {(epochs[i] - epochs[i - 1]) / 60:g} min after previous sample "
            f"({len(gaps)} gap(s) total)",
            i,
        )
    return _build(pid, epochs, values)


def read_segments(source, patient_id: Optional[str] = None) -> list[Trace]:
    """Read a CSV that may contain gaps, returning one uniform trace per contiguous segment."""
    pid, epochs, values = _read_rows(source, patient_id)
    cuts = [0, *map(int, _gaps(epochs)), len(values)]
    return [_build(pid, epochs[a:b], values[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]


# ----------------------------------------------------------------- carb splitting


def split_carb_series(carbs, rate: float = CARB_RATE, step_minutes: int = STEP_MINUTES):
    """Spread each carb entry forward in chunks of ``rate * step_minutes`` grams.

    Returns ``(split, dropped_grams)`` where ``dropped_grams`` is what would
    have spilled past the end of the series.
    """
    if not rate > 0:
        raise InvalidInputError("eating rate must be > 0")
    carbs = np.asarray(carbs, dtype=np.float64)
    chunk = rate * step_minutes
    n = len(carbs)
    out = np.zeros(n)
    dropped = 0.0
    for t in np.nonzero(carbs > 0)[0]:
        left = float(carbs[t])
        k = int(t)
        while left > 0:
            bite = min(left, chunk)
            if k < n:
                out[k] += bite
            else:
                dropped += bite
            left -= bite
            k += 1
    return out, dropped


def split_carbs(trace: Trace, rate: float = CARB_RATE) -> Trace:
    """Apply the casual-eating-rate carb split to a trace.

    Grams spilling past the end of the trace are dropped and reported with a
    :class:`CarbTruncationWarning`.
    """
    split, dropped = split_carb_series(trace.carbs, rate, trace.step_minutes)
    if dropped > 0:
        warnings.warn(
            CarbTruncationWarning(f"{dropped:g} g of carbs spilled past the end of trace {trace.patient_id}", dropped),
            stacklevel=2,
        )
    return trace.replace(carbs=split)


# -------------------------------------------------------------------- labeling


@dataclass(frozen=True)
class ReboundLabel:
    low_index: int
    high_index: int

    @property
    def gap_steps(self) -> int:
        return self.high_index - self.low_index

    def __post_init__(self):
        if not 0 < self.gap_steps <= REBOUND_WINDOW_STEPS:
            raise InvalidInputError(f"rebound gap must be within 1..{REBOUND_WINDOW_STEPS} steps")


def label_rebound_highs(trace_or_bg, low: float = 70.0, high: float = 180.0) -> list[ReboundLabel]:
    """Single chronological pass over CGM values.

    Tracks the most recent reading below ``low``; a reading above ``high``
    within 24 steps of it yields a label and clears the tracker so the same
    low is never counted twice.
    """
    bg = trace_or_bg.bg if isinstance(trace_or_bg, Trace) else np.asarray(trace_or_bg, dtype=float)
    labels = []
    last_low = None
    for i, v in enumerate(bg):
        if v < low:
            last_low = i
        elif v > high and last_low is not None and i - last_low <= REBOUND_WINDOW_STEPS:
            labels.append(ReboundLabel(last_low, i))
            last_low = None
    return labels


# ------------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    boundary: str = "chronological"

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise InvalidInputError("train_fraction must lie strictly between 0 and 1")
        if self.boundary != "chronological":
            raise InvalidInputError("only chronological splits are supported")


def split_train_test(traces: Iterable[Trace], config: SplitConfig = SplitConfig(), window_steps: int = 1):
    """Chronological per-patient split of all samples into train and test.

    Segments (traces) of each patient are taken in time order; the first
    ``train_fraction`` of that patient's samples go to train. A segment
    straddling the cut is split into two independent segments, so no window
    built inside one segment can overlap the other side.
    """
    by_patient: "OrderedDict[str, list[Trace]]" = OrderedDict()
    for tr in traces:
        by_patient.setdefault(tr.patient_id, []).append(tr)
    train, test = [], []
    for pid, segs in by_patient.items():
        segs = sorted(segs, key=lambda t: t.start_epoch)
        total = sum(len(s) for s in segs)
        cut = int(math.floor(config.train_fraction * total))
        if total - cut < window_steps:
            raise DataError(f"patient {pid}: {total - cut} test samples cannot hold one {window_steps}-step window")
        pos = 0
        for seg in segs:
            a, b = pos, pos + len(seg)
            if b <= cut:
                train.append(seg)
            elif a >= cut:
                test.append(seg)
            else:
                train.append(seg.slice(0, cut - a))
                test.append(seg.slice(cut - a, len(seg)))
            pos = b
    return train, test


def group_by_patient(traces: Iterable[Trace]) -> "OrderedDict[str, list[Trace]]":
    out: "OrderedDict[str, list[Trace]]" = OrderedDict()
    for tr in traces:
        out.setdefault(tr.patient_id, []).append(tr)
    return out


def trace_csv_text(traces, header_comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    write_trace_csv(traces, buf, header_comment)
    return buf.getvalue()
