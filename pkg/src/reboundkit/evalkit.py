"""Regression and alert metrics, rebound counts and the ablation harness."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .alerting import BgWindow, categorize
from .core import DEFAULT_RANGE, DataError, InvalidInputError, SafeRange, Trace
from .forecaster import Attention, Forecaster, ModelConfig, WindowSet, build_windows, predict_horizon, train
from .ingest import label_rebound_highs
from .simkit import cgm_noise_floor


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.shape != t.shape:
        raise InvalidInputError(f"rmse length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise InvalidInputError("rmse needs at least one value")
    return float(np.sqrt(np.mean((p - t) ** 2)))


# ---------------------------------------------------------------- predictors


class OraclePredictor:
    """Returns the true future CGM values."""

    def predict_windows(self, windows: WindowSet) -> np.ndarray:
        return windows.target.copy()


class ConstantPredictor:
    def __init__(self, value: float = 120.0):
        self.value = value

    def predict_windows(self, windows: WindowSet) -> np.ndarray:
        return np.full(windows.target.shape, self.value)


class ZeroOrderHold:
    """Repeats the last observed CGM value over the horizon."""

    def predict_windows(self, windows: WindowSet) -> np.ndarray:
        return np.repeat(windows.enc[:, -1:, 0], windows.target.shape[1], axis=1)


# ------------------------------------------------------------- alert metrics


def _pct(num: int, den: int) -> Optional[float]:
    return None if den == 0 else 100.0 * num / den


@dataclass(frozen=True)
class AlertMetrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> Optional[float]:
        return _pct(self.tp + self.tn, self.total)

    @property
    def precision(self) -> Optional[float]:
        """None when nothing was predicted positive."""
        return _pct(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> Optional[float]:
        """None when there are no positive windows."""
        return _pct(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if r is None:
            return None
        p = 0.0 if p is None else p
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def __add__(self, other: "AlertMetrics") -> "AlertMetrics":
        return AlertMetrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_row(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def rebound_in_windows(observed: np.ndarray, future: np.ndarray, rng: SafeRange = DEFAULT_RANGE) -> np.ndarray:
    """Per window: a low anywhere in the input followed by a high anywhere in the future part."""
    return np.any(observed < rng.low, axis=1) & np.any(future > rng.high, axis=1)


def alert_confusion(truth: np.ndarray, predicted: np.ndarray) -> AlertMetrics:
    truth = np.asarray(truth, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    return AlertMetrics(
        int(np.sum(truth & predicted)),
        int(np.sum(~truth & predicted)),
        int(np.sum(truth & ~predicted)),
        int(np.sum(~truth & ~predicted)),
    )


def evaluate_alerts(predictor, data, n: int = 12, m: int = 12, rng: SafeRange = DEFAULT_RANGE) -> AlertMetrics:
    """Window-level rebound-high confusion counts.

    A window is truly positive when its observed input plus the true future
    CGM contain a low followed by a high; it is predicted positive when the
    input plus the predictor's forecast do.
    """
    windows = data if isinstance(data, WindowSet) else build_windows(data, n, m)
    if len(windows) == 0:
        raise DataError("no test windows")
    preds = predictor.predict_windows(windows)
    truth = rebound_in_windows(windows.observed, windows.target, rng)
    hit = rebound_in_windows(windows.observed, preds, rng)
    return alert_confusion(truth, hit)


# ----------------------------------------------------------------- counting


def count_rebound_highs(dataset: Mapping[str, Sequence[Trace]]) -> Dict[str, int]:
    return {pid: sum(len(label_rebound_highs(t)) for t in traces) for pid, traces in dataset.items()}


# ------------------------------------------------------------------ reports


@dataclass
class RegressionRow:
    patient: str
    rmse: float
    zoh_rmse: float
    cgm_rmse: Optional[float]
    windows: int


def regression_report(model_or_predictor, test: Sequence[Trace], patient: str, n: int = 12, m: int = 12) -> RegressionRow:
    w = build_windows(test, n, m)
    pred = model_or_predictor.predict_windows(w)
    floor = cgm_noise_floor(test) if all(t.true_bg is not None for t in test) else None
    return RegressionRow(patient, rmse(pred, w.target), rmse(ZeroOrderHold().predict_windows(w), w.target), floor, len(w))


def _fmt(v, width=10, digits=3) -> str:
    if v is None:
        return "-".rjust(width)
    if isinstance(v, float):
        return f"{v:{width}.{digits}f}"
    return str(v).rjust(width)


def format_table(headers: Sequence[str], rows: Sequence[Sequence], first_width: int = 12) -> str:
    lines = [headers[0].ljust(first_width) + "".join(h.rjust(14) for h in headers[1:])]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(str(r[0]).ljust(first_width) + "".join(_fmt(v, 14) for v in r[1:]))
    return "\n".join(lines)


def write_rows_csv(path, headers: Sequence[str], rows: Sequence[Sequence], header_comment: Optional[str] = None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(headers)
        for r in rows:
            w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in r])


def alert_table(metrics: Mapping[str, AlertMetrics]):
    """Rows for patients with at least one positive window, plus the omitted patient ids."""
    rows, omitted = [], []
    for pid, am in metrics.items():
        if am.tp + am.fn == 0:
            omitted.append(pid)
            continue
        rows.append([pid, am.tp, am.fp, am.fn, am.tn, am.accuracy, am.precision, am.recall, am.f1])
    return rows, omitted


ALERT_HEADERS = ["patient", "tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "f1"]
VARIANTS = (Attention.FULL, Attention.NO_CARB_FOCUS, Attention.NONE)
VARIANT_LABELS = {Attention.FULL: "Our Approach", Attention.NO_CARB_FOCUS: "No Carb Focus", Attention.NONE: "No Attention"}


@dataclass
class AblationReport:
    rows: List[tuple] = field(default_factory=list)  # (patient, variant, rmse)

    def rmse(self, patient: str, variant: Attention) -> float:
        for p, v, r in self.rows:
            if p == patient and v == Attention(variant):
                return r
        raise KeyError((patient, variant))

    @property
    def patients(self) -> List[str]:
        seen = []
        for p, _, _ in self.rows:
            if p not in seen:
                seen.append(p)
        return seen

    def table_rows(self):
        return [[p] + [self.rmse(p, v) for v in VARIANTS] for p in self.patients]

    def format(self) -> str:
        return format_table(["patient"] + [VARIANT_LABELS[v] for v in VARIANTS], self.table_rows())


def compare_ablations(
    train_data: Mapping[str, Sequence[Trace]],
    test_data: Mapping[str, Sequence[Trace]],
    config: ModelConfig = ModelConfig(),
    models_out: Optional[dict] = None,
    timings: Optional[dict] = None,
) -> AblationReport:
    """Train the full model and both ablations per patient on identical splits and seeds.

    ``models_out`` and ``timings`` (seconds) are filled per ``(patient, variant)`` when given.
    """
    report = AblationReport()
    for pid, tr in train_data.items():
        w_test = build_windows(test_data[pid], config.n_input_steps, config.m_horizon_steps)
        for variant in VARIANTS:
            t0 = time.perf_counter()
            model, _ = train(tr, replace(config, attention=variant))
            if timings is not None:
                timings[(pid, variant)] = time.perf_counter() - t0
            report.rows.append((pid, variant, rmse(model.predict_windows(w_test), w_test.target)))
            if models_out is not None:
                models_out[(pid, variant)] = model
    return report


def plot_rows(model: Forecaster, trace: Trace):
    """Per step: glucose, the 1-hour-ahead forecast made for that step, and the alert category at that step."""
    cfg = model.config
    n, m = cfg.n_input_steps, cfg.m_horizon_steps
    truth = trace.true_bg if trace.true_bg is not None else trace.bg
    forecast_for = {}
    kinds = {}
    for t in range(n - 1, len(trace)):
        pw = predict_horizon(model, trace, t)
        forecast_for[t + m] = float(pw.predicted_bg[-1])
        if n >= 12 and m == 12:
            kinds[t] = categorize(BgWindow(trace.bg[t - 11 : t + 1], pw.predicted_bg)).value
    rows = []
    for t in range(len(trace)):
        rows.append([t, float(truth[t]), forecast_for.get(t), kinds.get(t, "")])
    return rows
