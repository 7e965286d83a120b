
import numpy as np
import pytest
from hypothesis import given, strategies as st

from reboundkit.core import DataError, Trace
from reboundkit.forecaster import Attention, ModelConfig, WindowSet, build_windows
from reboundkit.evalkit import (
    AlertMetrics,
    ConstantPredictor,
    OraclePredictor,
    ZeroOrderHold,
    alert_table,
    compare_ablations,
    count_rebound_highs,
    evaluate_alerts,
    plot_rows,
    regression_report,
    rmse,
)


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0
    assert rmse([1, 2], [0, 0]) == pytest.approx(np.sqrt(2.5))
    a, b = np.arange(6.0), np.arange(6.0)[::-1]
    pooled = np.sqrt((3 * rmse(a[:3], b[:3]) ** 2 + 3 * rmse(a[3:], b[3:]) ** 2) / 6)
    assert rmse(a, b) == pytest.approx(pooled)


def synthetic_windows(n_pos=10, n_neg=990):
    N = n_pos + n_neg
    enc = np.zeros((N, 12, 4))
    enc[:, :, 0] = 120.0
    target = np.full((N, 12), 120.0)
    enc[:n_pos, 4, 0] = 60.0
    target[:n_pos, 7] = 210.0
    return WindowSet(enc, np.zeros((N, 12, 4)), target, np.zeros((N, 12), bool))


class MissesFive:
    def predict_windows(self, w):
        p = w.target.copy()
        p[:5] = 120.0
        return p


def test_hand_tallied_fixture():
    am = evaluate_alerts(MissesFive(), synthetic_windows())
    assert (am.tp, am.fp, am.fn, am.tn) == (5, 0, 5, 990)
    assert am.recall == 50.0 and am.precision == 100.0
    assert am.accuracy == pytest.approx(995 / 10)
    assert am.f1 == pytest.approx(2 * 100 * 50 / 150)


def test_oracle_and_constant_predictors():
    w = synthetic_windows()
    oracle = evaluate_alerts(OraclePredictor(), w)
    assert oracle.precision == oracle.recall == 100.0 and oracle.fp == oracle.fn == 0
    const = evaluate_alerts(ConstantPredictor(120.0), w)
    assert const.recall == 0.0 and const.precision is None and const.accuracy >= 90.0


def test_ground_truth_does_not_depend_on_model():
    w = synthetic_windows()
    for p in (OraclePredictor(), ConstantPredictor(), ZeroOrderHold(), MissesFive()):
        am = evaluate_alerts(p, w)
        assert am.tp + am.fn == 10


def test_no_windows():
    with pytest.raises(DataError):
        evaluate_alerts(OraclePredictor(), [Trace("p", 0.0, [100] * 5, [1] * 5, [0] * 5, [0] * 5, [0] * 5)])


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metric_definitions(tp, fp, fn, tn):
    am = AlertMetrics(tp, fp, fn, tn)
    total = tp + fp + fn + tn
    if total:
        assert am.accuracy == pytest.approx(100 * (tp + tn) / total)
    assert (am.precision is None) == (tp + fp == 0)
    assert (am.recall is None) == (tp + fn == 0)
    if am.recall is not None and am.precision:
        assert am.f1 == pytest.approx(2 * am.precision * am.recall / (am.precision + am.recall))
    merged = am + AlertMetrics(1, 2, 3, 4)
    assert merged.total == total + 10


def test_alert_table_omits_patients_without_positives():
    rows, omitted = alert_table({"a": AlertMetrics(1, 0, 1, 10), "b": AlertMetrics(0, 2, 0, 10)})
    assert [r[0] for r in rows] == ["a"] and omitted == ["b"]


def test_zero_order_hold(small_traces):
    w = build_windows(small_traces[:1], 12, 12)
    p = ZeroOrderHold().predict_windows(w)
    np.testing.assert_array_equal(p[0], np.full(12, small_traces[0].bg[11]))


def test_rebound_counts(small_traces):
    flat = Trace("x", 0.0, [100] * 30, [1] * 30, [0] * 30, [0] * 30, [0] * 30)
    assert count_rebound_highs({"x": [flat]}) == {"x": 0}
    counts = count_rebound_highs({"sim": small_traces})
    assert counts["sim"] >= 0


def test_regression_report_and_plot(tiny_model, small_traces):
    row = regression_report(tiny_model, small_traces[10:], "p")
    assert row.windows == 2 * 122 and row.rmse > 0 and row.zoh_rmse > 0
    assert row.cgm_rmse == pytest.approx(np.sqrt(np.mean(np.concatenate([t.bg - t.true_bg for t in small_traces[10:]]) ** 2)))
    rows = plot_rows(tiny_model, small_traces[10])
    assert len(rows) == 145
    assert rows[0][2] is None and rows[23][2] is not None and rows[11][3] != ""


def test_ablation_report_shape(small_traces):
    cfg = ModelConfig(hidden=4, head_hidden=2, epochs=1, batch=64)
    train = {"p1": small_traces[:2], "p2": small_traces[2:4]}
    test = {"p1": small_traces[4:5], "p2": small_traces[5:6]}
    models = {}
    report = compare_ablations(train, test, cfg, models)
    assert len(report.rows) == 2 * 3
    assert report.patients == ["p1", "p2"]
    assert len(report.table_rows()) == 2 and len(report.table_rows()[0]) == 4
    assert "No Carb Focus" in report.format()
    assert models[("p2", Attention.NONE)].attention is None
