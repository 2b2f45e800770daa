import numpy as np
import pytest
from scipy import stats

from errors import ConfigurationError, DomainError
from feedback import (
    ControllerConfig,
    DriftModel,
    DriftState,
    apply_calibration,
    evolve_drift,
    phase_feedback_step,
    polarization_feedback_step,
    run_scheduled_session,
)
from rng import make_rng
from tests.mocks.builders import field_spec


def test_still_model_only_advances_time():
    state = DriftState(timing_offset=3.0, wavelength_offset=-0.2, polarization_angle=0.1, phase_offset=0.01)
    out = evolve_drift(state, 5.0, DriftModel.still(), make_rng(0))
    assert out.wall_time == 5.0
    assert (out.timing_offset, out.wavelength_offset, out.polarization_angle, out.phase_offset) == (
        3.0, -0.2, 0.1, 0.01,
    )


def test_random_walk_variance_grows_linearly():
    model = DriftModel(timing_variance=0.5, timing_diurnal=0.0, wavelength_variance=0.0,
                       wavelength_diurnal=0.0, polarization_variance=0.0, phase_variance=0.0)
    rng = make_rng(9, "walk")
    trials, steps = 2000, 50
    finals = []
    for _ in range(trials):
        state = DriftState()
        for _ in range(steps):
            state = evolve_drift(state, 1.0, model, rng)
        finals.append(state.timing_offset)
    expected = 0.5 * steps
    # sample variance of normal data has std sqrt(2 / (n - 1)) * sigma^2
    assert abs(np.var(finals, ddof=1) - expected) <= 4 * expected * np.sqrt(2 / (trials - 1))


def test_non_positive_dt_rejected():
    with pytest.raises(DomainError):
        evolve_drift(DriftState(), -1.0, DriftModel(), make_rng(0))
    with pytest.raises(DomainError):
        evolve_drift(DriftState(), 0.0, DriftModel(), make_rng(0))


@pytest.mark.parametrize("state", [
    DriftState(),
    DriftState(timing_offset=180.0, wavelength_offset=-7.3, phase_offset=2.0),
    DriftState(timing_offset=-55.0, wavelength_offset=0.74, polarization_angle=0.4),
])
def test_calibration_brings_offsets_within_thresholds(state):
    config = ControllerConfig()
    rng = make_rng(1, "cal")
    for _ in range(200):
        out = apply_calibration(state, config, rng)
        assert abs(out.timing_offset) <= config.timing_threshold
        assert abs(out.wavelength_offset) <= config.wavelength_threshold
        assert abs(out.phase_offset) <= config.phase_threshold
        assert out.polarization_angle == state.polarization_angle


def test_polarization_loop_moves_toward_full_transmission():
    config = ControllerConfig()
    state = DriftState.from_transmission(0.90)
    assert state.polarization_transmission == pytest.approx(0.90)
    out = polarization_feedback_step(state, config)
    assert out.polarization_transmission > 0.90
    for _ in range(10):
        out = polarization_feedback_step(out, config)
    assert out.polarization_transmission >= 0.999


def test_phase_loop_converges():
    config = ControllerConfig()
    state = DriftState(phase_offset=0.3)
    for _ in range(5):
        state = phase_feedback_step(state, config)
    assert abs(state.phase_offset) < 1e-5


def test_schedule_arithmetic():
    config = ControllerConfig()
    spec = field_spec(duration=2 * config.calibration_interval)
    report = run_scheduled_session(spec, DriftModel(), config)
    assert len(report.calibrations) == 2
    assert report.duty_cycle == pytest.approx(1 - config.calibration_dead_time / config.calibration_interval)
    assert report.duty_cycle == pytest.approx(config.duty_cycle)
    assert sum(b.duration for b in report.blocks) == pytest.approx(report.qkd_time)
    assert report.calibration_time == pytest.approx(2 * config.calibration_dead_time)


def test_session_shorter_than_interval_rejected():
    with pytest.raises(ConfigurationError):
        run_scheduled_session(field_spec(duration=600.0), DriftModel(), ControllerConfig())


def test_full_session_with_feedback_stays_within_bounds():
    config = ControllerConfig()
    report = run_scheduled_session(field_spec(seed=5), DriftModel(), config)
    assert report.violations(config) == 0
    assert report.transmission_fluctuation < config.polarization_threshold
    assert report.within_bounds(config)
    assert len(report.calibrations) == int(65520 // config.calibration_interval)
    assert all(b.overlap > 0.95 for b in report.blocks)


def test_free_running_drift_leaves_bounds():
    config = ControllerConfig(enabled=False)
    kept = 0
    for seed in range(5):
        report = run_scheduled_session(field_spec(seed=seed), DriftModel(), config)
        assert not report.calibrations
        assert report.duty_cycle == 1.0
        kept += report.within_bounds(config)
    assert kept == 0


def test_free_running_overlap_declines():
    config = ControllerConfig(enabled=False)
    spec_duration = 2 * config.calibration_interval
    overlaps = []
    for seed in range(20):
        report = run_scheduled_session(field_spec(seed=seed, duration=spec_duration), DriftModel(), config)
        overlaps.append([b.overlap for b in report.blocks])
    times = [b.start for b in report.blocks]
    fit = stats.linregress(times, np.mean(overlaps, axis=0))
    assert fit.slope < 0
    assert fit.pvalue < 0.05


def test_controller_config_validation():
    with pytest.raises(ConfigurationError):
        ControllerConfig(calibration_interval=0.0)
    with pytest.raises(ConfigurationError):
        ControllerConfig(calibration_dead_time=1800.0)
    with pytest.raises(ConfigurationError):
        ControllerConfig(timing_precision=30.0)
    with pytest.raises(ConfigurationError):
        DriftModel(timing_variance=-1.0)
