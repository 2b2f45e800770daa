import json

import pytest

from decoy import KeyResult, RatioReport, decompose
from errors import ValidationError
from feedback import ControllerConfig, DriftModel, run_scheduled_session
from report import (
    FEEDBACK_CHART,
    FEEDBACK_FILE,
    INSECURE_NOTICE,
    RATIO_CHART,
    RESULT_FILE,
    chart_segments,
    emit_feedback_report,
    emit_report,
    load_result,
)
from tests.mocks.builders import field_spec


def _result(K=9.5e5, m11=6.0e6, e11=0.26, k_ec=4.3e4, m=1.35e7):
    ratios = decompose(m, m11, e11, k_ec, K) if K > 0 else None
    return KeyResult(M11_lower=m11, e11_upper=e11, K_ec=k_ec, K=K, rate=K / 65520,
                     ratios=ratios, signal_count=m, signal_qber=0.0002)


def _consistent_result():
    m, m11, e11, k_ec = 1.35e7, 6.0e6, 0.26, 4.3e4
    ratios = decompose(m, m11, e11, k_ec, 0.0)
    k = (1.0 - ratios.ec_fraction - ratios.multiphoton_fraction - ratios.phase_error_fraction) * m
    return _result(K=k, m11=m11, e11=e11, k_ec=k_ec, m=m)


def test_chart_segments_order():
    ratios = RatioReport(0.01, 0.5, 0.3, 0.19)
    assert chart_segments(ratios) == [
        ("Error correction", 0.01),
        ("Multi-photon", 0.5),
        ("Phase error", 0.3),
        ("Final key", 0.19),
    ]


def test_emit_report_writes_result_and_chart(tmp_path):
    result = _consistent_result()
    artifacts = emit_report(result, tmp_path, {"seed": 3})
    assert artifacts == {"result": tmp_path / RESULT_FILE, "chart": tmp_path / RATIO_CHART}
    record = json.loads((tmp_path / RESULT_FILE).read_text())
    assert record["seed"] == 3
    assert record["K"] == pytest.approx(result.K)
    assert "notice" not in record
    assert (tmp_path / RATIO_CHART).read_text().lstrip().startswith("<?xml")


def test_zero_key_omits_chart(tmp_path):
    artifacts = emit_report(_result(K=0.0), tmp_path)
    assert "chart" not in artifacts
    assert not (tmp_path / RATIO_CHART).exists()
    assert json.loads((tmp_path / RESULT_FILE).read_text())["notice"] == INSECURE_NOTICE


def test_inconsistent_ratios_rejected(tmp_path):
    bad = _result()
    bad.ratios = RatioReport(0.1, 0.1, 0.1, 0.1)
    with pytest.raises(AssertionError):
        emit_report(bad, tmp_path)


def test_chart_bytes_are_deterministic(tmp_path):
    result = _consistent_result()
    emit_report(result, tmp_path / "a")
    emit_report(result, tmp_path / "b")
    assert (tmp_path / "a" / RATIO_CHART).read_bytes() == (tmp_path / "b" / RATIO_CHART).read_bytes()


def test_load_result_rebuilds_record(tmp_path):
    result = _consistent_result()
    emit_report(result, tmp_path)
    loaded = load_result(tmp_path / RESULT_FILE)
    assert loaded.K == pytest.approx(result.K)
    assert loaded.ratios == result.ratios


def test_load_result_rejects_garbage(tmp_path):
    path = tmp_path / RESULT_FILE
    path.write_text("[]")
    with pytest.raises(ValidationError):
        load_result(path)
    with pytest.raises(ValidationError):
        load_result(tmp_path / "missing.json")


def test_feedback_report(tmp_path):
    config = ControllerConfig()
    schedule = run_scheduled_session(field_spec(duration=3600.0), DriftModel(), config)
    artifacts = emit_feedback_report(schedule, tmp_path)
    assert artifacts == {"series": tmp_path / FEEDBACK_FILE, "chart": tmp_path / FEEDBACK_CHART}
    series = json.loads((tmp_path / FEEDBACK_FILE).read_text())
    assert len(series["blocks"]) == len(schedule.blocks)
    assert series["calibrations"] == [1800.0, 3600.0]
    assert series["duty_cycle"] == pytest.approx(config.duty_cycle)
