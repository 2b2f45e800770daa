import numpy as np
import pytest

from errors import ConfigurationError, ValidationError
from protocol import (
    BSMOutcome,
    Basis,
    CountTables,
    DetectionPattern,
    IntensityClass,
    IntensitySet,
    PSI_MINUS_MASKS,
    PulseChoice,
    accumulate,
    accumulate_arrays,
    classify_bsm,
    is_psi_plus,
    sample_pulse_choice,
    sample_pulse_choices,
    sift,
)
from rng import make_rng

SIGNAL = IntensityClass.SIGNAL


def test_strict_cross_pattern_rule():
    psi_minus = [m for m in range(16) if classify_bsm(DetectionPattern.from_mask(m)) is BSMOutcome.PSI_MINUS]
    assert sorted(psi_minus) == sorted(PSI_MINUS_MASKS)
    assert classify_bsm(DetectionPattern(d1_bin0=True, d1_bin1=False, d2_bin0=False, d2_bin1=True)) is BSMOutcome.PSI_MINUS
    assert classify_bsm(DetectionPattern(True, True, False, False)) is BSMOutcome.NO_EVENT
    assert classify_bsm(DetectionPattern(True, True, True, True)) is BSMOutcome.NO_EVENT


def test_psi_plus_is_same_bin_cross_detector():
    same_bin = DetectionPattern(d1_bin0=True, d1_bin1=False, d2_bin0=True, d2_bin1=False)
    assert is_psi_plus(same_bin)
    assert classify_bsm(same_bin) is BSMOutcome.PSI_PLUS


def test_pattern_mask_round_trip():
    for mask in range(16):
        assert DetectionPattern.from_mask(mask).mask == mask


def test_sift_z_basis_anticorrelated_pair_is_not_error():
    alice = PulseChoice(SIGNAL, Basis.Z, 0)
    bob = PulseChoice(SIGNAL, Basis.Z, 1)
    pair = sift(alice, bob, BSMOutcome.PSI_MINUS)
    assert (pair.alice_bit_after_flip, pair.bob_bit) == (1, 1)
    assert not pair.error


def test_sift_x_basis_equal_bits_is_error():
    alice = PulseChoice(SIGNAL, Basis.X, 0)
    bob = PulseChoice(SIGNAL, Basis.X, 0)
    pair = sift(alice, bob, BSMOutcome.PSI_MINUS)
    assert (pair.alice_bit_after_flip, pair.bob_bit) == (1, 0)
    assert pair.error


def test_sift_without_x_flip():
    alice = PulseChoice(SIGNAL, Basis.X, 0)
    bob = PulseChoice(SIGNAL, Basis.X, 0)
    pair = sift(alice, bob, BSMOutcome.PSI_MINUS, x_flip=False)
    assert not pair.error
    # Z basis is always flipped
    z_pair = sift(PulseChoice(SIGNAL, Basis.Z, 0), PulseChoice(SIGNAL, Basis.Z, 0), BSMOutcome.PSI_MINUS, x_flip=False)
    assert z_pair.error


def test_sift_discards_mismatch_and_no_event():
    alice = PulseChoice(SIGNAL, Basis.Z, 0)
    assert sift(alice, PulseChoice(SIGNAL, Basis.X, 1), BSMOutcome.PSI_MINUS) is None
    assert sift(alice, PulseChoice(SIGNAL, Basis.Z, 1), BSMOutcome.NO_EVENT) is None


def test_error_flag_is_negated_xor():
    for basis in Basis:
        for a in (0, 1):
            for b in (0, 1):
                pair = sift(PulseChoice(SIGNAL, basis, a), PulseChoice(SIGNAL, basis, b), BSMOutcome.PSI_MINUS)
                assert pair.error == bool((a ^ b) ^ 1)


def test_accumulate_empty_and_single_error():
    assert accumulate([]) == CountTables.zeros()
    record = (PulseChoice(SIGNAL, Basis.Z, 0), PulseChoice(SIGNAL, Basis.Z, 0), BSMOutcome.PSI_MINUS)
    tables = accumulate([record])
    assert tables.count(Basis.Z, SIGNAL, SIGNAL) == 1
    assert tables.errors[0, 2, 2] == 1
    assert tables.qber(Basis.Z, SIGNAL, SIGNAL) == 1.0
    assert tables.qber(Basis.X, SIGNAL, SIGNAL) is None


def test_accumulate_counts_psi_plus_separately():
    alice = PulseChoice(SIGNAL, Basis.X, 0)
    bob = PulseChoice(IntensityClass.DECOY, Basis.X, 1)
    same_bin = classify_bsm(DetectionPattern(d1_bin0=True, d2_bin0=True))
    tables = accumulate([(alice, bob, same_bin), (alice, bob, same_bin), (alice, bob, BSMOutcome.PSI_MINUS)])
    assert tables.psi_plus[1, 2, 1] == 2
    assert tables.coincidences[1, 2, 1] == 1
    assert tables.pulses_sent[1, 2, 1] == 3
    assert tables.psi_plus.sum() == 2


def test_qber_table_marks_empty_cells():
    tables = accumulate([(PulseChoice(SIGNAL, Basis.Z, 0), PulseChoice(SIGNAL, Basis.Z, 1), BSMOutcome.PSI_MINUS)])
    qbers = tables.qber_table()
    assert qbers[0, 2, 2] == 0.0
    assert np.isnan(qbers[1, 2, 2])


def _random_records(n, seed):
    rng = make_rng(seed, "records")
    records = []
    for _ in range(n):
        alice = sample_pulse_choice(IntensitySet(), rng)
        bob = sample_pulse_choice(IntensitySet(), rng)
        outcome = BSMOutcome.PSI_MINUS if rng.random() < 0.3 else BSMOutcome.NO_EVENT
        records.append((alice, bob, outcome))
    return records


def test_accumulate_merge_equals_single_pass():
    records = _random_records(2000, seed=5)
    whole = accumulate(records)
    for cut in (0, 1, 777, 2000):
        assert accumulate(records[:cut]).merge(accumulate(records[cut:])) == whole
    assert whole.total_pulses == 2000


def test_vectorised_accumulate_matches_records():
    rng = make_rng(11, "vector")
    n = 5000
    alice = sample_pulse_choices(IntensitySet(), rng, n)
    bob = sample_pulse_choices(IntensitySet(), rng, n)
    patterns = rng.integers(16, size=n)
    records = [
        (
            PulseChoice(IntensityClass(int(alice[0][i])), Basis(int(alice[1][i])), int(alice[2][i])),
            PulseChoice(IntensityClass(int(bob[0][i])), Basis(int(bob[1][i])), int(bob[2][i])),
            classify_bsm(DetectionPattern.from_mask(int(patterns[i]))),
        )
        for i in range(n)
    ]
    expected = accumulate(records)
    got = accumulate_arrays(alice, bob, patterns)
    for name in ("coincidences", "errors", "pulses_sent", "pulses_mismatched", "psi_plus"):
        assert np.array_equal(getattr(got, name), getattr(expected, name))


def test_sampling_frequencies_within_four_sigma():
    rng = make_rng(2024, "choices")
    n = 10**6
    intensity, basis, bit = sample_pulse_choices(IntensitySet(), rng, n)
    for cls, p in zip(IntensityClass, (0.22, 0.45, 0.33)):
        freq = np.mean(intensity == int(cls))
        assert abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n)
    assert abs(basis.mean() - 0.5) <= 4 * np.sqrt(0.25 / n)
    assert abs(bit.mean() - 0.5) <= 4 * np.sqrt(0.25 / n)


def test_degenerate_set_always_signal():
    always = IntensitySet(p_vacuum=0.0, p_decoy=0.0, p_signal=1.0)
    rng = make_rng(1)
    assert all(sample_pulse_choice(always, rng).intensity is SIGNAL for _ in range(100))


def test_same_seed_same_sequence():
    a = sample_pulse_choices(IntensitySet(), make_rng(3, "x"), 1000)
    b = sample_pulse_choices(IntensitySet(), make_rng(3, "x"), 1000)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


@pytest.mark.parametrize("kwargs", [
    {"p_vacuum": 0.5, "p_decoy": 0.5, "p_signal": 0.5},
    {"p_vacuum": -0.1, "p_decoy": 0.6, "p_signal": 0.5},
    {"decoy": 0.5, "signal": 0.4},
])
def test_invalid_intensity_set(kwargs):
    with pytest.raises(ConfigurationError):
        IntensitySet(**kwargs)


def test_validate_reports_cell():
    tables = CountTables.zeros()
    tables.coincidences[1, 0, 2] = 5
    tables.errors[1, 0, 2] = 6
    tables.pulses_sent[1, 0, 2] = 10
    with pytest.raises(ValidationError) as info:
        tables.validate()
    assert info.value.cell == ("X", "vacuum", "signal")
    tables.errors[1, 0, 2] = 1
    tables.pulses_sent[1, 0, 2] = 4
    with pytest.raises(ValidationError):
        tables.validate()
