"""Environmental drift and the feedback controllers that hold the two
independent sources indistinguishable at the measurement station.

Timing and wavelength are re-aligned by a calibration procedure that
interrupts key generation every ``calibration_interval`` seconds;
polarization and phase are stabilised by real-time loops running every
simulation step. Each QKD block emits the ``InterferenceParams`` seen by
the photonics model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigurationError, DomainError
from logger import get_logger
from photonics import InterferenceParams, SessionSpec, mode_overlap
from rng import make_rng

logger = get_logger(__name__)

_EPS = 1e-9


@dataclass(frozen=True)
class DriftState:
    """Offsets between the two pulses arriving at the beam splitter.

    Polarization is tracked as a misalignment angle; the transmission through
    the polarizer in front of the splitter is ``cos^2`` of that angle.
    """

    timing_offset: float = 0.0  # ps
    wavelength_offset: float = 0.0  # pm
    polarization_angle: float = 0.0  # rad
    phase_offset: float = 0.0  # rad
    wall_time: float = 0.0  # s

    def __post_init__(self) -> None:
        values = (self.timing_offset, self.wavelength_offset, self.polarization_angle,
                  self.phase_offset, self.wall_time)
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"Drift state must be finite: {self}")

    @property
    def polarization_transmission(self) -> float:
        return math.cos(self.polarization_angle) ** 2

    @classmethod
    def from_transmission(cls, transmission: float, **kwargs: float) -> "DriftState":
        if not 0.0 <= transmission <= 1.0:
            raise DomainError(f"Transmission must lie in [0, 1], got {transmission}")
        return cls(polarization_angle=math.acos(math.sqrt(transmission)), **kwargs)


@dataclass(frozen=True)
class DriftModel:
    """Random-walk variances per second plus optional diurnal swings."""

    timing_variance: float = 1e-3  # ps^2 / s
    timing_diurnal: float = 40.0  # ps amplitude
    wavelength_variance: float = 2e-6  # pm^2 / s
    wavelength_diurnal: float = 1.0  # pm amplitude
    polarization_variance: float = 2e-4  # rad^2 / s
    phase_variance: float = 2e-5  # rad^2 / s
    diurnal_period: float = 86400.0  # s

    def __post_init__(self) -> None:
        for name in ("timing_variance", "wavelength_variance", "polarization_variance", "phase_variance"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.diurnal_period <= 0:
            raise ConfigurationError("diurnal_period must be positive")

    @classmethod
    def still(cls) -> "DriftModel":
        """No drift at all."""
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DriftModel":
        return cls(**{k: float(v) for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class ControllerConfig:
    enabled: bool = True
    calibration_interval: float = 1800.0
    calibration_dead_time: float = 60.0
    timing_threshold: float = 20.0  # ps
    timing_precision: float = 5.0  # ps, residual after a timing calibration
    wavelength_threshold: float = 1.0  # pm
    wavelength_step: float = 0.5  # pm, laser actuation precision
    wavelength_noise: float = 0.1  # pm, wavemeter error
    polarization_threshold: float = 0.03
    phase_threshold: float = 0.05  # rad
    polarization_gain: float = 0.9
    phase_gain: float = 0.9
    block_duration: float = 60.0
    dt: float = 1.0

    def __post_init__(self) -> None:
        if self.calibration_interval <= 0:
            raise ConfigurationError("calibration_interval must be positive")
        if not 0.0 <= self.calibration_dead_time < self.calibration_interval:
            raise ConfigurationError("calibration_dead_time must lie in [0, calibration_interval)")
        for name in ("timing_threshold", "wavelength_threshold", "polarization_threshold",
                     "phase_threshold", "wavelength_step", "block_duration", "dt"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.timing_precision <= self.timing_threshold:
            raise ConfigurationError("timing_precision must not exceed timing_threshold")
        if self.wavelength_step / 2 + self.wavelength_noise > self.wavelength_threshold:
            raise ConfigurationError("Wavelength actuation cannot reach the wavelength threshold")
        for name in ("polarization_gain", "phase_gain"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1]")

    @property
    def duty_cycle(self) -> float:
        if not self.enabled:
            return 1.0
        return 1.0 - self.calibration_dead_time / self.calibration_interval

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ControllerConfig":
        fields = cls.__dataclass_fields__
        return cls(**{
            k: (bool(v) if k == "enabled" else float(v)) for k, v in data.items() if k in fields
        })


def _diurnal(amplitude: float, period: float, t0: float, t1: float) -> float:
    w = 2.0 * math.pi / period
    return amplitude * (math.sin(w * t1) - math.sin(w * t0))


def evolve_drift(state: DriftState, dt: float, model: DriftModel, rng: np.random.Generator) -> DriftState:
    if dt <= 0:
        raise DomainError(f"Time step must be positive, got {dt}")
    t0, t1 = state.wall_time, state.wall_time + dt
    steps = rng.standard_normal(4) * np.sqrt(np.array([
        model.timing_variance, model.wavelength_variance,
        model.polarization_variance, model.phase_variance,
    ]) * dt)
    return DriftState(
        timing_offset=state.timing_offset + steps[0]
        + _diurnal(model.timing_diurnal, model.diurnal_period, t0, t1),
        wavelength_offset=state.wavelength_offset + steps[1]
        + _diurnal(model.wavelength_diurnal, model.diurnal_period, t0, t1),
        polarization_angle=state.polarization_angle + steps[2],
        phase_offset=state.phase_offset + steps[3],
        wall_time=t1,
    )


def apply_calibration(state: DriftState, config: ControllerConfig, rng: np.random.Generator) -> DriftState:
    """Re-align arrival time and wavelength, re-lock the interferometer phase.

    The wavelength is corrected in whole actuation steps from a noisy
    wavemeter reading, so the residual stays within half a step plus the
    reading error.
    """
    measured = state.wavelength_offset + rng.uniform(-config.wavelength_noise, config.wavelength_noise)
    correction = round(measured / config.wavelength_step) * config.wavelength_step
    return replace(
        state,
        timing_offset=float(rng.uniform(-config.timing_precision, config.timing_precision)),
        wavelength_offset=state.wavelength_offset - correction,
        phase_offset=float(rng.uniform(-config.phase_threshold, config.phase_threshold)),
    )


def polarization_feedback_step(state: DriftState, config: ControllerConfig) -> DriftState:
    # maximises the count rate through the polarizer
    return replace(state, polarization_angle=(1.0 - config.polarization_gain) * state.polarization_angle)


def phase_feedback_step(state: DriftState, config: ControllerConfig) -> DriftState:
    return replace(state, phase_offset=(1.0 - config.phase_gain) * state.phase_offset)


def interference_from_state(state: DriftState, base: InterferenceParams) -> InterferenceParams:
    return replace(
        base,
        timing_offset_ps=state.timing_offset,
        spectral_offset_pm=state.wavelength_offset,
        polarization_overlap=state.polarization_transmission,
        phase_misalignment=abs(state.phase_offset),
    )


@dataclass
class QKDBlock:
    start: float
    duration: float
    params: InterferenceParams
    overlap: float

    def to_dict(self) -> Dict[str, Any]:
        return {"start": self.start, "duration": self.duration, "overlap": self.overlap,
                "params": asdict(self.params)}


@dataclass
class CalibrationEvent:
    time: float
    before: DriftState
    after: DriftState


@dataclass
class ScheduleReport:
    """Outcome of a scheduled session: QKD blocks, calibrations, duty cycle."""

    duration: float
    blocks: List[QKDBlock] = field(default_factory=list)
    calibrations: List[CalibrationEvent] = field(default_factory=list)
    qkd_time: float = 0.0
    transmission_min: float = 1.0
    transmission_max: float = 0.0

    @property
    def calibration_time(self) -> float:
        return self.duration - self.qkd_time

    @property
    def duty_cycle(self) -> float:
        return self.qkd_time / self.duration

    @property
    def transmission_fluctuation(self) -> float:
        return self.transmission_max - self.transmission_min

    def violations(self, config: ControllerConfig) -> int:
        """Number of blocks outside the timing / wavelength / phase residual bounds."""
        return sum(
            1 for b in self.blocks
            if abs(b.params.timing_offset_ps) > config.timing_threshold
            or abs(b.params.spectral_offset_pm) > config.wavelength_threshold
            or b.params.phase_misalignment > config.phase_threshold
        )

    def within_bounds(self, config: ControllerConfig) -> bool:
        return (
            self.violations(config) == 0
            and self.transmission_fluctuation < config.polarization_threshold
        )

    def block_list(self) -> List[Tuple[InterferenceParams, float]]:
        return [(b.params, b.duration) for b in self.blocks]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "duration": self.duration,
            "qkd_time": self.qkd_time,
            "duty_cycle": self.duty_cycle,
            "calibrations": [c.time for c in self.calibrations],
            "transmission_min": self.transmission_min,
            "transmission_max": self.transmission_max,
            "blocks": [b.to_dict() for b in self.blocks],
        }


class _Plant:
    """Drift integrator with the real-time loops closed around it."""

    def __init__(self, model: DriftModel, config: ControllerConfig, rng: np.random.Generator,
                 report: ScheduleReport, state: DriftState) -> None:
        self.model = model
        self.config = config
        self.rng = rng
        self.report = report
        self.state = state

    def advance(self, span: float) -> None:
        n = max(1, int(round(span / self.config.dt)))
        step = span / n
        for _ in range(n):
            self.state = evolve_drift(self.state, step, self.model, self.rng)
            if self.config.enabled:
                self.state = polarization_feedback_step(self.state, self.config)
                self.state = phase_feedback_step(self.state, self.config)
            t = self.state.polarization_transmission
            self.report.transmission_min = min(self.report.transmission_min, t)
            self.report.transmission_max = max(self.report.transmission_max, t)


def run_scheduled_session(
    spec: SessionSpec,
    model: DriftModel,
    config: ControllerConfig,
    initial: Optional[DriftState] = None,
) -> ScheduleReport:
    """Alternate QKD blocks with calibrations over ``spec.duration`` seconds.

    Each calibration occupies the last ``calibration_dead_time`` seconds of
    its interval. With the controllers disabled the drift runs free and
    nothing interrupts key generation.
    """
    spec.validate()
    interval = config.calibration_interval
    if spec.duration < interval - _EPS:
        raise ConfigurationError(
            f"Session of {spec.duration} s is shorter than one calibration interval ({interval} s)"
        )
    rng = make_rng(spec.seed, "drift")
    base = spec.model.interference
    state = initial if initial is not None else DriftState()
    report = ScheduleReport(duration=spec.duration)
    report.transmission_min = report.transmission_max = state.polarization_transmission
    plant = _Plant(model, config, rng, report, state)

    t = 0.0
    next_cal = interval if config.enabled else math.inf
    while t < spec.duration - _EPS:
        cal_due = next_cal <= spec.duration + _EPS
        if cal_due and t >= next_cal - config.calibration_dead_time - _EPS:
            if next_cal - t > _EPS:
                plant.advance(next_cal - t)
            before = plant.state
            plant.state = apply_calibration(before, config, rng)
            report.calibrations.append(CalibrationEvent(next_cal, before, plant.state))
            logger.debug(
                "calibration t=%.0f timing=%.2f->%.2f wavelength=%.3f->%.3f",
                next_cal, before.timing_offset, plant.state.timing_offset,
                before.wavelength_offset, plant.state.wavelength_offset,
            )
            t = next_cal
            next_cal += interval
            continue
        end = min(t + config.block_duration, spec.duration)
        if cal_due:
            end = min(end, next_cal - config.calibration_dead_time)
        plant.advance(end - t)
        params = interference_from_state(plant.state, base)
        report.blocks.append(QKDBlock(t, end - t, params, mode_overlap(params)))
        report.qkd_time += end - t
        t = end

    violations = report.violations(config)
    logger.info(
        "Scheduled session: %d blocks, %d calibrations, duty cycle %.4f, %d blocks out of bounds",
        len(report.blocks), len(report.calibrations), report.duty_cycle, violations,
    )
    if config.enabled and violations:
        logger.warning("%d QKD blocks exceeded the feedback thresholds", violations)
    return report
