"""Protocol-level types and pure logic of decoy-state MDIQKD.

State-preparation sampling, |psi-> post-selection, sifting with the
anti-correlation bit flip, and count-table accumulation. Everything here is
pure given an explicit random generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np

from errors import ConfigurationError, ValidationError
from logger import get_logger

logger = get_logger(__name__)


class IntensityClass(IntEnum):
    VACUUM = 0
    DECOY = 1
    SIGNAL = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "IntensityClass":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ConfigurationError(f"Unknown intensity class: {label}") from None


class Basis(IntEnum):
    Z = 0
    X = 1

    @classmethod
    def from_label(cls, label: str) -> "Basis":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ConfigurationError(f"Unknown basis: {label}") from None


class BSMOutcome(Enum):
    PSI_MINUS = "psi_minus"
    # recorded as a diagnostic, never post-selected
    PSI_PLUS = "psi_plus"
    NO_EVENT = "no_event"


# Detection patterns are packed into a 4-bit mask:
# bit0 = SNSPD1@bin0, bit1 = SNSPD1@bin1, bit2 = SNSPD2@bin0, bit3 = SNSPD2@bin1.
PSI_MINUS_MASKS = (0b0110, 0b1001)
PSI_PLUS_MASKS = (0b0101, 0b1010)
N_PATTERNS = 16


@dataclass(frozen=True)
class IntensitySet:
    """Vacuum / weak decoy / signal intensities of one sender."""

    decoy: float = 0.07
    signal: float = 0.40
    p_vacuum: float = 0.22
    p_decoy: float = 0.45
    p_signal: float = 0.33
    vacuum: float = 0.0

    def __post_init__(self) -> None:
        probs = (self.p_vacuum, self.p_decoy, self.p_signal)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigurationError(f"Intensity probabilities outside [0, 1]: {probs}")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ConfigurationError(f"Intensity probabilities sum to {sum(probs)!r}, expected 1")
        if self.vacuum != 0.0:
            raise ConfigurationError("Vacuum intensity must be 0")
        if not 0.0 < self.decoy < self.signal:
            raise ConfigurationError(
                f"Require 0 < decoy < signal, got decoy={self.decoy} signal={self.signal}"
            )

    @property
    def means(self) -> np.ndarray:
        """Mean photon numbers indexed by IntensityClass."""
        return np.array([self.vacuum, self.decoy, self.signal])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([self.p_vacuum, self.p_decoy, self.p_signal])

    def mean(self, intensity: IntensityClass) -> float:
        return float(self.means[int(intensity)])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "decoy": self.decoy,
            "signal": self.signal,
            "probabilities": [self.p_vacuum, self.p_decoy, self.p_signal],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IntensitySet":
        probs = data.get("probabilities", [0.22, 0.45, 0.33])
        if len(probs) != 3:
            raise ConfigurationError(f"Expected three intensity probabilities, got {probs}")
        return cls(
            decoy=float(data.get("decoy", 0.07)),
            signal=float(data.get("signal", 0.40)),
            p_vacuum=float(probs[0]),
            p_decoy=float(probs[1]),
            p_signal=float(probs[2]),
        )


@dataclass(frozen=True)
class PulseChoice:
    intensity: IntensityClass
    basis: Basis
    bit: int


@dataclass(frozen=True)
class DetectionPattern:
    d1_bin0: bool = False
    d1_bin1: bool = False
    d2_bin0: bool = False
    d2_bin1: bool = False

    @property
    def mask(self) -> int:
        return (
            int(self.d1_bin0)
            | int(self.d1_bin1) << 1
            | int(self.d2_bin0) << 2
            | int(self.d2_bin1) << 3
        )

    @classmethod
    def from_mask(cls, mask: int) -> "DetectionPattern":
        return cls(bool(mask & 1), bool(mask & 2), bool(mask & 4), bool(mask & 8))


@dataclass(frozen=True)
class SiftedPair:
    basis: Basis
    alice_bit_after_flip: int
    bob_bit: int
    intensity_pair: Tuple[IntensityClass, IntensityClass]

    @property
    def error(self) -> bool:
        return self.alice_bit_after_flip != self.bob_bit


def _cell_labels(basis: int, alice: int, bob: int) -> Tuple[str, str, str]:
    return Basis(basis).name, IntensityClass(alice).label, IntensityClass(bob).label


@dataclass(eq=False)
class CountTables:
    """Coincidence and error counts per (basis, alice intensity, bob intensity).

    Arrays are indexed ``[basis, alice, bob]`` with Basis / IntensityClass
    values. ``pulses_sent`` counts matched-basis pulses of the cell;
    basis-mismatched pulses go to ``pulses_mismatched[alice, bob]``.
    ``psi_plus`` is diagnostic only. ``true_m11`` / ``true_err11`` hold the
    single-photon-pair ground truth when the tables come from a simulator.
    """

    coincidences: np.ndarray = field(default_factory=lambda: np.zeros((2, 3, 3), dtype=np.int64))
    errors: np.ndarray = field(default_factory=lambda: np.zeros((2, 3, 3), dtype=np.int64))
    pulses_sent: np.ndarray = field(default_factory=lambda: np.zeros((2, 3, 3), dtype=np.int64))
    pulses_mismatched: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))
    psi_plus: np.ndarray = field(default_factory=lambda: np.zeros((2, 3, 3), dtype=np.int64))
    true_m11: np.ndarray = field(default_factory=lambda: np.zeros((2, 3, 3), dtype=np.int64))
    true_err11: np.ndarray = field(default_factory=lambda: np.zeros((2, 3, 3), dtype=np.int64))

    ARRAY_FIELDS = (
        "coincidences", "errors", "pulses_sent", "pulses_mismatched",
        "psi_plus", "true_m11", "true_err11",
    )

    @classmethod
    def zeros(cls, dtype: Any = np.int64) -> "CountTables":
        return cls(**{
            name: np.zeros((3, 3) if name == "pulses_mismatched" else (2, 3, 3), dtype=dtype)
            for name in cls.ARRAY_FIELDS
        })

    def merge(self, other: "CountTables") -> "CountTables":
        """Cell-wise sum; accumulation over a split stream merges to one pass."""
        return CountTables(**{
            name: getattr(self, name) + getattr(other, name) for name in self.ARRAY_FIELDS
        })

    __add__ = merge

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CountTables):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name)) for name in self.ARRAY_FIELDS
        )

    def count(self, basis: Basis, alice: IntensityClass, bob: IntensityClass) -> float:
        return self.coincidences[int(basis), int(alice), int(bob)].item()

    def qber(self, basis: Basis, alice: IntensityClass, bob: IntensityClass) -> Optional[float]:
        """Err/M of one cell, or None when the cell has no coincidences."""
        m = self.coincidences[int(basis), int(alice), int(bob)]
        if m <= 0:
            return None
        return float(self.errors[int(basis), int(alice), int(bob)] / m)

    def qber_table(self) -> np.ndarray:
        """Err/M per cell, NaN where a cell has no coincidences."""
        m = self.coincidences.astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(m > 0, self.errors / np.where(m > 0, m, 1.0), np.nan)

    @property
    def total_pulses(self) -> float:
        return self.pulses_sent.sum().item() + self.pulses_mismatched.sum().item()

    def validate(self) -> None:
        """Raise ValidationError unless 0 <= Err <= M <= pulses_sent in every cell."""
        for b in Basis:
            for a in IntensityClass:
                for c in IntensityClass:
                    cell = (int(b), int(a), int(c))
                    m = self.coincidences[cell]
                    err = self.errors[cell]
                    sent = self.pulses_sent[cell]
                    if err < 0 or m < 0:
                        raise ValidationError("Negative count", _cell_labels(*cell))
                    if err > m:
                        raise ValidationError(f"Errors {err} exceed coincidences {m}", _cell_labels(*cell))
                    if m > sent:
                        raise ValidationError(f"Coincidences {m} exceed pulses sent {sent}", _cell_labels(*cell))


def sample_pulse_choice(intensities: IntensitySet, rng: np.random.Generator) -> PulseChoice:
    """Draw one sender's intensity, basis and bit for a clock cycle."""
    intensity = IntensityClass(int(rng.choice(3, p=intensities.probabilities)))
    basis = Basis(int(rng.integers(2)))
    bit = int(rng.integers(2))
    return PulseChoice(intensity, basis, bit)


def sample_pulse_choices(
    intensities: IntensitySet, rng: np.random.Generator, size: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised sample_pulse_choice: (intensity, basis, bit) index arrays."""
    intensity = rng.choice(3, size=size, p=intensities.probabilities)
    basis = rng.integers(2, size=size)
    bit = rng.integers(2, size=size)
    return intensity, basis, bit


def classify_bsm(pattern: DetectionPattern) -> BSMOutcome:
    """Strict |psi-> rule: exactly one click on each detector, in opposite bins."""
    if pattern.mask in PSI_MINUS_MASKS:
        return BSMOutcome.PSI_MINUS
    if is_psi_plus(pattern):
        return BSMOutcome.PSI_PLUS
    return BSMOutcome.NO_EVENT


def is_psi_plus(pattern: DetectionPattern) -> bool:
    """Same-bin, cross-detector coincidence. Never post-selected."""
    return pattern.mask in PSI_PLUS_MASKS


def error_table(x_flip: bool = True) -> np.ndarray:
    """Boolean ``[basis, alice_bit, bob_bit]`` marking erroneous psi- events.

    With the flip applied Alice's bit becomes ``1 - bit`` so an error is
    ``alice_bit == bob_bit``. ``x_flip=False`` keeps Alice's X-basis bit as is.
    """
    same = np.array([[True, False], [False, True]])
    return np.stack([same, same if x_flip else ~same])


def sift(
    alice: PulseChoice, bob: PulseChoice, outcome: BSMOutcome, x_flip: bool = True
) -> Optional[SiftedPair]:
    if outcome is not BSMOutcome.PSI_MINUS or alice.basis != bob.basis:
        return None
    flip = alice.basis is Basis.Z or x_flip
    alice_bit = 1 - alice.bit if flip else alice.bit
    return SiftedPair(
        basis=alice.basis,
        alice_bit_after_flip=alice_bit,
        bob_bit=bob.bit,
        intensity_pair=(alice.intensity, bob.intensity),
    )


def accumulate(
    records: Iterable[Tuple[PulseChoice, PulseChoice, BSMOutcome]], x_flip: bool = True
) -> CountTables:
    tables = CountTables.zeros()
    for alice, bob, outcome in records:
        ia, ib = int(alice.intensity), int(bob.intensity)
        if alice.basis != bob.basis:
            tables.pulses_mismatched[ia, ib] += 1
            continue
        cell = (int(alice.basis), ia, ib)
        tables.pulses_sent[cell] += 1
        if outcome is BSMOutcome.PSI_PLUS:
            tables.psi_plus[cell] += 1
            continue
        pair = sift(alice, bob, outcome, x_flip=x_flip)
        if pair is None:
            continue
        tables.coincidences[cell] += 1
        if pair.error:
            tables.errors[cell] += 1
    return tables


def accumulate_arrays(
    alice: Tuple[np.ndarray, np.ndarray, np.ndarray],
    bob: Tuple[np.ndarray, np.ndarray, np.ndarray],
    patterns: np.ndarray,
    single_photon: Optional[np.ndarray] = None,
    x_flip: bool = True,
) -> CountTables:
    """Vectorised accumulate over ``(intensity, basis, bit)`` arrays and pattern masks."""
    ia, basis_a, bit_a = alice
    ib, basis_b, bit_b = bob
    matched = basis_a == basis_b
    psi_minus = np.isin(patterns, PSI_MINUS_MASKS) & matched
    psi_plus = np.isin(patterns, PSI_PLUS_MASKS) & matched
    wrong = error_table(x_flip)[basis_a, bit_a, bit_b] & psi_minus
    cell = basis_a * 9 + ia * 3 + ib

    def count(selector: np.ndarray) -> np.ndarray:
        return np.bincount(cell[selector], minlength=18).reshape(2, 3, 3).astype(np.int64)

    tables = CountTables(
        coincidences=count(psi_minus),
        errors=count(wrong),
        pulses_sent=count(matched),
        pulses_mismatched=np.bincount(
            (ia * 3 + ib)[~matched], minlength=9
        ).reshape(3, 3).astype(np.int64),
        psi_plus=count(psi_plus),
    )
    if single_photon is not None:
        tables.true_m11 = count(psi_minus & single_photon)
        tables.true_err11 = count(wrong & single_photon)
    return tables
