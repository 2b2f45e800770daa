"""Result records and charts for finished runs."""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from decoy import KeyResult, RatioReport  # noqa: E402
from errors import ValidationError  # noqa: E402
from feedback import ScheduleReport  # noqa: E402
from logger import get_logger  # noqa: E402
from table_io import write_json  # noqa: E402

logger = get_logger(__name__)

RESULT_FILE = "result.json"
RATIO_CHART = "ratios.svg"
FEEDBACK_FILE = "feedback.json"
FEEDBACK_CHART = "feedback.svg"
INSECURE_NOTICE = "No secret key: the phase-error and error-correction costs consume all single-photon coincidences."

_SVG_STYLE = {"svg.hashsalt": "mdiqkd", "svg.fonttype": "path"}
_SEGMENTS = (
    ("Error correction", "ec_fraction"),
    ("Multi-photon", "multiphoton_fraction"),
    ("Phase error", "phase_error_fraction"),
    ("Final key", "final_key_fraction"),
)


def chart_segments(ratios: RatioReport) -> List[Tuple[str, float]]:
    return [(label, getattr(ratios, name)) for label, name in _SEGMENTS]


def _save_svg(fig: Any, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _ratio_chart(ratios: RatioReport, path: Path) -> None:
    segments = chart_segments(ratios)
    labels = [label for label, _ in segments]
    values = [value for _, value in segments]
    with matplotlib.rc_context(_SVG_STYLE):
        fig, (pie_ax, bar_ax) = plt.subplots(1, 2, figsize=(10, 4.5))
        pie_ax.pie(values, labels=[f"{v:.2%}" for v in values], startangle=90, counterclock=False)
        pie_ax.set_aspect("equal")
        bars = bar_ax.bar(labels, [100.0 * v for v in values])
        bar_ax.bar_label(bars, fmt="%.2f%%")
        bar_ax.set_ylabel("share of signal-signal Z-basis coincidences (%)")
        bar_ax.tick_params(axis="x", labelrotation=15)
        fig.suptitle("Raw key consumption")
        fig.tight_layout()
        _save_svg(fig, path)


def emit_report(
    result: KeyResult,
    out_dir: Union[str, Path],
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Path]:
    """Write ``result.json`` and, when a key survives, the ratio chart.

    Returns the written artifact paths keyed by kind.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"Output directory {out} is not writable: {exc}") from exc
    if result.ratios is not None and not result.clamped:
        assert abs(result.ratios.total - 1.0) < 1e-9, f"ratio decomposition sums to {result.ratios.total!r}"

    record = result.to_dict()
    if extra:
        record.update(extra)
    artifacts: Dict[str, Path] = {}
    if result.K > 0 and result.ratios is not None:
        _ratio_chart(result.ratios, out / RATIO_CHART)
        artifacts["chart"] = out / RATIO_CHART
    else:
        record["notice"] = INSECURE_NOTICE
        logger.warning(INSECURE_NOTICE)
    write_json(out / RESULT_FILE, record)
    artifacts["result"] = out / RESULT_FILE
    return artifacts


def load_result(path: Union[str, Path]) -> KeyResult:
    """Rebuild a KeyResult from a previously written ``result.json``."""
    try:
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValidationError(f"Result file {path} must hold a JSON object")
        ratios = RatioReport(**data["ratios"]) if data.get("ratios") else None
        return KeyResult(
            M11_lower=float(data["M11_lower"]),
            e11_upper=float(data["e11_upper"]),
            K_ec=float(data["K_ec"]),
            K=float(data["K"]),
            rate=float(data["rate"]),
            ratios=ratios,
            signal_count=float(data.get("signal_count", 0.0)),
            signal_qber=float(data.get("signal_qber", 0.0)),
            e11_bit=float(data.get("e11_bit", 0.0)),
            secure=bool(data.get("secure", True)),
            clamped=bool(data.get("clamped", False)),
            estimator=str(data.get("estimator", "analytic")),
            cross_check=dict(data.get("cross_check") or {}),
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"Cannot read result file {path}: {exc}") from exc


def emit_feedback_report(report: ScheduleReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write the per-block overlap series and its plot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / FEEDBACK_FILE, report.to_dict())
    hours = [b.start / 3600.0 for b in report.blocks]
    with matplotlib.rc_context(_SVG_STYLE):
        fig, (v_ax, t_ax) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
        v_ax.plot(hours, [b.overlap for b in report.blocks], lw=1)
        v_ax.set_ylabel("mode overlap V")
        t_ax.plot(hours, [b.params.timing_offset_ps for b in report.blocks], lw=1, label="timing (ps)")
        t_ax.plot(hours, [b.params.spectral_offset_pm for b in report.blocks], lw=1, label="wavelength (pm)")
        t_ax.set_xlabel("time (h)")
        t_ax.legend(loc="upper right")
        for event in report.calibrations:
            for ax in (v_ax, t_ax):
                ax.axvline(event.time / 3600.0, color="0.8", lw=0.5, zorder=0)
        fig.tight_layout()
        _save_svg(fig, out / FEEDBACK_CHART)
    return {"series": out / FEEDBACK_FILE, "chart": out / FEEDBACK_CHART}
