import copy
import math
from dataclasses import replace

import pytest

from decoy import (
    SecurityParams,
    analyze,
    binary_entropy,
    chernoff_interval,
    decompose,
    error_correction_cost,
    estimate_M11_lower,
    estimate_e11_upper,
    key_rate,
    lp_estimate,
    ratio_report,
    secure_key_length,
)
from errors import ConfigurationError, DomainError
from metrics import get_metrics
from photonics import cell_probabilities, sample_session_tables
from protocol import Basis, CountTables, IntensityClass
from tests.mocks.builders import ideal_spec, field_spec, published_stats, stats_from

Z, X = int(Basis.Z), int(Basis.X)
V, D, S = int(IntensityClass.VACUUM), int(IntensityClass.DECOY), int(IntensityClass.SIGNAL)

PUBLISHED_M11 = 6.0671e6
PUBLISHED_E11 = 0.2493
PUBLISHED_K_EC = 4.7485e4
PUBLISHED_K = 1.1046e6


@pytest.fixture(scope="module")
def oracle_stats():
    spec = field_spec(seed=31)
    return stats_from(sample_session_tables(spec), spec)



@pytest.fixture(scope="module")
def oracle_runs():
    spec = field_spec()
    probs = cell_probabilities(spec)
    runs = []
    for seed in range(100):
        seeded = replace(spec, seed=seed)
        runs.append(stats_from(sample_session_tables(seeded, probs), seeded))
    return runs


def test_binary_entropy():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.2493) == pytest.approx(0.810167, abs=1e-6)
    assert binary_entropy(0.1) == pytest.approx(binary_entropy(0.9))
    with pytest.raises(DomainError):
        binary_entropy(1.2)


def test_chernoff_interval_contains_observation():
    lo, hi = chernoff_interval(1000, 1e-10)
    assert 0 <= lo < 1000 < hi
    assert chernoff_interval(0, 1e-10)[0] == 0.0
    assert chernoff_interval(0, 1e-10)[1] > 0


def test_chernoff_interval_narrows_with_counts():
    widths = []
    for n in (1e2, 1e4, 1e6):
        lo, hi = chernoff_interval(n, 1e-10)
        widths.append((hi - lo) / n)
    assert widths[0] > widths[1] > widths[2]
    # relative half-width at a million counts
    assert widths[2] / 2 < 0.015


def test_chernoff_interval_monotone_in_epsilon():
    strict = chernoff_interval(5000, 1e-12)
    loose = chernoff_interval(5000, 1e-6)
    assert strict[0] <= loose[0] and strict[1] >= loose[1]


def test_chernoff_interval_rejects_bad_arguments():
    with pytest.raises(DomainError):
        chernoff_interval(-1, 1e-10)
    with pytest.raises(DomainError):
        chernoff_interval(10, 0.0)


def test_security_params():
    sec = SecurityParams()
    assert sec.epsilon == pytest.approx(1e-10 / 28)
    with pytest.raises(ConfigurationError):
        SecurityParams(f=0.9)
    with pytest.raises(ConfigurationError):
        SecurityParams(estimator="bayes")
    assert SecurityParams.from_dict({"f": "1.2", "unknown": 1}).f == 1.2


def test_error_correction_cost():
    assert error_correction_cost(1.35e7, 0.0, 1.16) == 0.0
    assert error_correction_cost(1.35e7, 0.0002, 1.16) == pytest.approx(4.30e4, rel=0.02)
    assert error_correction_cost(2.7e7, 0.0002, 1.16) == pytest.approx(
        2 * error_correction_cost(1.35e7, 0.0002, 1.16)
    )


def test_published_key_length_and_rate():
    k = secure_key_length(PUBLISHED_M11, PUBLISHED_E11, PUBLISHED_K_EC)
    assert k == pytest.approx(PUBLISHED_K, rel=0.002)
    assert key_rate(PUBLISHED_K, 65520) == pytest.approx(16.86, abs=0.005)
    assert key_rate(PUBLISHED_K, 2 * 65520) == pytest.approx(16.86 / 2, abs=0.005)


def test_secure_key_length_limits():
    assert secure_key_length(1e6, 0.0, 0.0) == 1e6
    assert secure_key_length(1e6, 0.5, 0.0) == 0.0
    assert secure_key_length(1e6, 0.2, 1e7) == 0.0
    assert secure_key_length(1e6, 0.1, 0.0) > secure_key_length(1e6, 0.2, 0.0)
    with pytest.raises(DomainError):
        secure_key_length(1e6, 1.5, 0.0)


def test_published_ratio_trace():
    ratios = decompose(1.35e7, PUBLISHED_M11, PUBLISHED_E11, PUBLISHED_K_EC, PUBLISHED_K)
    # table counts carry three significant digits
    assert ratios.ec_fraction == pytest.approx(0.0035, abs=1e-4)
    assert ratios.multiphoton_fraction == pytest.approx(0.5512, abs=1e-3)
    assert ratios.phase_error_fraction == pytest.approx(0.3636, abs=1e-3)
    assert ratios.final_key_fraction == pytest.approx(0.0818, abs=5e-4)


def test_decompose_without_losses():
    ratios = decompose(1000.0, 1000.0, 0.0, 0.0, 1000.0)
    assert (ratios.ec_fraction, ratios.multiphoton_fraction, ratios.phase_error_fraction) == (0.0, 0.0, 0.0)
    assert ratios.final_key_fraction == 1.0
    with pytest.raises(DomainError):
        decompose(0.0, 0.0, 0.0, 0.0, 0.0)


def test_published_tables_m11_bound():
    m11 = estimate_M11_lower(published_stats(), SecurityParams())
    assert 4.5e6 <= m11 <= 7.5e6
    assert m11 == pytest.approx(PUBLISHED_M11, rel=0.25)


def test_published_tables_e11_bound():
    stats = published_stats()
    sec = SecurityParams()
    e11 = estimate_e11_upper(stats, estimate_M11_lower(stats, sec), sec)
    assert e11 == pytest.approx(PUBLISHED_E11, abs=0.05)


def test_published_tables_full_analysis():
    stats = published_stats()
    result = analyze(stats, SecurityParams())
    assert result.secure
    assert not result.clamped
    assert 12.0 <= result.rate <= 22.0
    assert result.rate == pytest.approx(result.K / 65520)
    assert result.K_ec == pytest.approx(4.30e4, rel=0.02)
    assert result.ratios.total == pytest.approx(1.0, abs=1e-9)
    assert ratio_report(stats, result) == result.ratios
    assert result.M11_lower <= stats.signal_count


def test_lp_agrees_with_analytic_on_published_tables():
    stats = published_stats()
    sec = SecurityParams()
    analytic = estimate_M11_lower(stats, sec)
    lp_m11, lp_e11 = lp_estimate(stats, sec)
    assert lp_m11 == pytest.approx(analytic, rel=0.25)
    assert 0.0 <= lp_e11 <= 0.5
    assert get_metrics().snapshot()["counters"]["lp_solves"] == 2


def test_bounds_hold_on_simulated_ground_truth(oracle_runs):
    sec = SecurityParams()
    misses = 0
    for stats in oracle_runs:
        t = stats.tables
        result = analyze(stats, sec)
        true_e11 = float(t.true_err11[X, 1:, 1:].sum() / t.true_m11[X, 1:, 1:].sum())
        if not (0 < result.M11_lower <= t.true_m11[Z, S, S] and result.e11_upper >= true_e11):
            misses += 1
    assert misses <= math.floor(len(oracle_runs) * 10 * sec.epsilon_total)


def test_lp_bound_holds_on_simulated_ground_truth(oracle_stats):
    sec = SecurityParams()
    truth = float(oracle_stats.tables.true_m11[Z, S, S])
    assert 0 < estimate_M11_lower(oracle_stats, sec) <= truth
    lp_m11, _ = lp_estimate(oracle_stats, sec)
    assert lp_m11 <= truth
    assert lp_m11 >= 0.9 * estimate_M11_lower(oracle_stats, sec)


def test_phase_error_bound_covers_true_single_photon_errors(oracle_stats):
    t = oracle_stats.tables
    true_rate = float(t.true_err11[X, 1:, 1:].sum() / t.true_m11[X, 1:, 1:].sum())
    result = analyze(oracle_stats, SecurityParams())
    assert result.e11_bit >= true_rate
    assert result.e11_upper >= result.e11_bit


def test_lp_cutoff_changes_bound_little(oracle_stats):
    truth = float(oracle_stats.tables.true_m11[Z, S, S])
    low, _ = lp_estimate(oracle_stats, SecurityParams(lp_cutoff=5))
    high, _ = lp_estimate(oracle_stats, SecurityParams(lp_cutoff=7))
    assert low <= truth and high <= truth
    assert high == pytest.approx(low, rel=0.1)


def test_lp_cross_check_recorded():
    result = analyze(published_stats(), SecurityParams(lp_cross_check=True))
    assert set(result.cross_check) == {"M11_lower", "e11_upper"}
    lp_result = analyze(published_stats(), SecurityParams(), estimator="lp")
    assert lp_result.estimator == "lp"
    assert lp_result.M11_lower == pytest.approx(result.cross_check["M11_lower"])


def test_ideal_channel_yields_key():
    spec = ideal_spec(seed=2)
    result = analyze(stats_from(sample_session_tables(spec), spec), SecurityParams())
    assert result.K > 0
    assert result.signal_qber < 0.001
    assert result.e11_bit < 0.1


def test_zero_tables_give_no_key():
    stats = stats_from(CountTables.zeros(), field_spec())
    sec = SecurityParams()
    assert estimate_M11_lower(stats, sec) == 0.0
    assert lp_estimate(stats, sec) == (0.0, 0.5)
    result = analyze(stats, sec)
    assert result.K == 0.0 and result.rate == 0.0
    assert not result.secure
    assert result.ratios is None


def test_all_x_errors_flag_insecure():
    stats = published_stats()
    stats.tables.errors[X] = stats.tables.coincidences[X]
    result = analyze(stats, SecurityParams())
    assert result.e11_upper == 0.5
    assert result.K == 0.0
    assert not result.secure
    assert get_metrics().snapshot()["counters"]["clamps"] >= 1


@pytest.mark.parametrize("cell", [(a, b) for a in (V, D, S) for b in (V, D, S)])
def test_more_x_errors_never_lower_phase_error_bound(cell):
    sec = SecurityParams()
    base = published_stats()
    m11 = estimate_M11_lower(base, sec)
    reference = estimate_e11_upper(base, m11, sec)
    room = int(base.tables.coincidences[(X,) + cell] - base.tables.errors[(X,) + cell])
    for extra in (1, 1_000, 20_000):
        if extra > room:
            break
        noisier = copy.deepcopy(base)
        noisier.tables.errors[(X,) + cell] += extra
        assert estimate_e11_upper(noisier, m11, sec) >= reference


def test_vacuum_cell_errors_do_not_enter_phase_error_bound():
    sec = SecurityParams()
    base = published_stats()
    m11 = estimate_M11_lower(base, sec)
    shifted = copy.deepcopy(base)
    shifted.tables.errors[X, V, D] -= 20_000
    shifted.tables.errors[X, S, V] += 20_000
    assert estimate_e11_upper(shifted, m11, sec) == estimate_e11_upper(base, m11, sec)
    assert lp_estimate(shifted, sec) == pytest.approx(lp_estimate(base, sec))


def test_unknown_estimator_rejected():
    with pytest.raises(ConfigurationError):
        analyze(published_stats(), SecurityParams(), estimator="bayes")
