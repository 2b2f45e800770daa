"""Finite-key security analysis for vacuum + weak decoy-state MDIQKD.

Observed coincidence and error counts are first relaxed by multiplicative
Chernoff bounds, then combined into a lower bound on the number of
signal-signal Z-basis coincidences caused by single-photon pairs (M11) and
an upper bound on their phase-error rate (e11). The key length follows
from ``M11 (1 - H(e11)) - K_ec``.

Cell arrays are indexed ``[basis, alice_intensity, bob_intensity]`` as in
``protocol.CountTables``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats as sps

from errors import ConfigurationError, DomainError, InfeasibleError
from logger import get_logger
from metrics import get_metrics
from protocol import Basis, CountTables, IntensityClass, IntensitySet

logger = get_logger(__name__)

V, D, S = IntensityClass.VACUUM, IntensityClass.DECOY, IntensityClass.SIGNAL
Z, X = int(Basis.Z), int(Basis.X)
ESTIMATORS = ("analytic", "lp")
# X cells whose decoy sums bound the single-photon bit-error rate
PHASE_ERROR_CELLS = ((D, D), (S, D), (D, S), (S, S))


@dataclass
class ObservedStats:
    tables: CountTables
    alice: IntensitySet
    bob: IntensitySet
    duration: float
    clock_rate: float = 75e6
    rounded: bool = False
    qber_decimals: Optional[int] = None
    acquired_at: Optional[datetime] = None

    def validate(self) -> None:
        if self.duration <= 0:
            raise ConfigurationError(f"Session duration must be positive, got {self.duration}")
        self.tables.validate()

    def count(self, basis: int, a: int, b: int) -> float:
        return float(self.tables.coincidences[basis, a, b])

    def errors(self, basis: int, a: int, b: int) -> float:
        return float(self.tables.errors[basis, a, b])

    def sent(self, basis: int, a: int, b: int) -> float:
        return float(self.tables.pulses_sent[basis, a, b])

    @property
    def signal_count(self) -> float:
        return self.count(Z, S, S)

    @property
    def signal_qber(self) -> float:
        m = self.signal_count
        return self.errors(Z, S, S) / m if m > 0 else 0.0


@dataclass(frozen=True)
class SecurityParams:
    epsilon_total: float = 1e-10
    f: float = 1.16
    lp_cutoff: int = 6
    # covers 9 Z and 9 X counts, 4 non-vacuum X error counts and 4 sampling steps
    n_applications: int = 28
    estimator: str = "analytic"
    lp_cross_check: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon_total < 1.0:
            raise ConfigurationError(f"epsilon_total must lie in (0, 1), got {self.epsilon_total}")
        if self.f < 1.0:
            raise ConfigurationError(f"Error-correction inefficiency f must be >= 1, got {self.f}")
        if self.lp_cutoff < 2:
            raise ConfigurationError("lp_cutoff must be at least 2")
        if self.n_applications < 1:
            raise ConfigurationError("n_applications must be positive")
        if self.estimator not in ESTIMATORS:
            raise ConfigurationError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")

    @property
    def epsilon(self) -> float:
        """Failure probability allotted to each bound."""
        return self.epsilon_total / self.n_applications

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SecurityParams":
        casts = {"epsilon_total": float, "f": float, "lp_cutoff": int, "n_applications": int,
                 "estimator": str, "lp_cross_check": bool}
        return cls(**{k: casts[k](v) for k, v in data.items() if k in casts})


@dataclass(frozen=True)
class RatioReport:
    ec_fraction: float
    multiphoton_fraction: float
    phase_error_fraction: float
    final_key_fraction: float

    @property
    def total(self) -> float:
        return (self.ec_fraction + self.multiphoton_fraction
                + self.phase_error_fraction + self.final_key_fraction)

    def to_dict(self) -> Dict[str, float]:
        return {
            "ec_fraction": self.ec_fraction,
            "multiphoton_fraction": self.multiphoton_fraction,
            "phase_error_fraction": self.phase_error_fraction,
            "final_key_fraction": self.final_key_fraction,
        }


@dataclass
class KeyResult:
    M11_lower: float
    e11_upper: float
    K_ec: float
    K: float
    rate: float
    ratios: Optional[RatioReport]
    signal_count: float = 0.0
    signal_qber: float = 0.0
    e11_bit: float = 0.0
    secure: bool = True
    clamped: bool = False
    estimator: str = "analytic"
    cross_check: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "M11_lower": self.M11_lower,
            "e11_upper": self.e11_upper,
            "e11_bit": self.e11_bit,
            "K_ec": self.K_ec,
            "K": self.K,
            "rate": self.rate,
            "signal_count": self.signal_count,
            "signal_qber": self.signal_qber,
            "secure": self.secure,
            "clamped": self.clamped,
            "estimator": self.estimator,
            "ratios": self.ratios.to_dict() if self.ratios else None,
            "cross_check": dict(self.cross_check),
        }


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"Binary entropy argument must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return float(-x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x))


def chernoff_interval(observed: float, epsilon: float) -> Tuple[float, float]:
    """Bounds on the expectation behind an observed count.

    Solves the multiplicative Chernoff tail equations, each at failure
    probability ``epsilon``: lower = x / (1 + d1), upper = x / (1 - d2).
    """
    if observed < 0:
        raise DomainError(f"Observed count must be non-negative, got {observed}")
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    log_eps = math.log(epsilon)
    if observed == 0:
        return 0.0, -log_eps
    x = float(observed)

    def lower_tail(d: float) -> float:
        return x * (d / (1.0 + d) - math.log1p(d)) - log_eps

    def upper_tail(d: float) -> float:
        return x * (-d / (1.0 - d) - math.log1p(-d)) - log_eps

    hi = 1.0
    while lower_tail(hi) > 0:
        hi *= 2.0
    d1 = optimize.brentq(lower_tail, 0.0, hi, xtol=1e-15, rtol=1e-13)
    d2 = optimize.brentq(upper_tail, 0.0, 1.0 - 1e-15, xtol=1e-15, rtol=1e-13)
    return x / (1.0 + d1), x / (1.0 - d2)


def _relaxed_gains(counts: np.ndarray, sent: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pulse gain bounds (lower, upper) for a 3x3 block of cells."""
    lower = np.zeros_like(counts, dtype=float)
    upper = np.zeros_like(counts, dtype=float)
    for idx in np.ndindex(counts.shape):
        if sent[idx] <= 0:
            continue
        lo, hi = chernoff_interval(float(counts[idx]), epsilon)
        lower[idx] = lo / sent[idx]
        upper[idx] = min(hi / sent[idx], 1.0)
    return lower, upper


def _x_error_gains(stats: ObservedStats, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    """Error-gain bounds of the X basis with vacuum cells taken at E = 1/2.

    A vacuum pulse carries no phase, so half of those coincidences are
    errors; the observed vacuum error counts are not used.
    """
    lo, hi = _relaxed_gains(stats.tables.errors[X], stats.tables.pulses_sent[X], epsilon)
    c_lo, c_hi = _relaxed_gains(stats.tables.coincidences[X], stats.tables.pulses_sent[X], epsilon)
    vacuum = _vacuum_mask()
    lo[vacuum] = 0.5 * c_lo[vacuum]
    hi[vacuum] = 0.5 * c_hi[vacuum]
    return lo, hi


def _vacuum_mask() -> np.ndarray:
    mask = np.zeros((3, 3), dtype=bool)
    mask[V, :] = True
    mask[:, V] = True
    return mask


def _decoy_sum(q: Tuple[np.ndarray, ...], a: float, b: float, row: int, col: int) -> float:
    """e^(a+b) Q_ab - e^b Q_0b - e^a Q_a0 + Q_00 for cells (row, col)."""
    return (math.exp(a + b) * q[0][row, col] - math.exp(b) * q[1][V, col]
            - math.exp(a) * q[2][row, V] + q[3][V, V])


def _single_photon_yield_lower(stats: ObservedStats, epsilon: float) -> float:
    lo, hi = _relaxed_gains(stats.tables.coincidences[Z], stats.tables.pulses_sent[Z], epsilon)
    nu_a, nu_b = stats.alice.decoy, stats.bob.decoy
    mu_a, mu_b = stats.alice.signal, stats.bob.signal
    r_a, r_b = nu_a / mu_a, nu_b / mu_b
    r_max = max(r_a, r_b)
    s_decoy = _decoy_sum((lo, hi, hi, lo), nu_a, nu_b, D, D)
    s_signal = _decoy_sum((hi, lo, lo, hi), mu_a, mu_b, S, S)
    return (s_decoy - r_a * r_b * r_max * s_signal) / (nu_a * nu_b * (1.0 - r_max))


def _pair_probability(a: float, b: float, n: int = 1, m: int = 1) -> float:
    return float(sps.poisson.pmf(n, a) * sps.poisson.pmf(m, b))


def estimate_M11_lower(stats: ObservedStats, sec: SecurityParams) -> float:
    """Lower bound on single-photon-pair coincidences in the Z-basis signal cell."""
    observed = stats.signal_count
    n_signal = stats.sent(Z, S, S)
    if observed <= 0 or n_signal <= 0:
        return 0.0
    y11 = _single_photon_yield_lower(stats, sec.epsilon)
    m11 = n_signal * _pair_probability(stats.alice.signal, stats.bob.signal) * y11
    if m11 < 0:
        logger.warning("Decoy bound on M11 is negative (%.4g); data inconsistent with model, clamping to 0", m11)
        get_metrics().increment("clamps")
        return 0.0
    if m11 > observed:
        logger.warning("Decoy bound on M11 (%.4g) exceeds observed count %.4g; clamping", m11, observed)
        get_metrics().increment("clamps")
        return observed
    return float(m11)


def _sampling_deviation(e: float, n_x: float, n_z: float, epsilon: float) -> float:
    """Deviation theta between the sampled X-basis and the Z-basis phase-error rate.

    Solves ``sqrt((nx + nz) / (nx nz e (1 - e))) 2^(-(nx + nz) xi(theta)) = epsilon`` with
    ``xi = H(e + theta - q theta) - q H(e) - (1 - q) H(e + theta)``, ``q = nx / (nx + nz)``.
    """
    if n_x <= 0 or n_z <= 0:
        return 0.5 - e
    e = min(max(e, 1e-12), 0.5 - 1e-12)
    total = n_x + n_z
    q = n_x / total
    log_prefactor = 0.5 * math.log2(total / (n_x * n_z * e * (1.0 - e)))
    h_e = binary_entropy(e)

    def excess(theta: float) -> float:
        xi = (binary_entropy(e + theta - q * theta) - q * h_e
              - (1.0 - q) * binary_entropy(e + theta))
        return log_prefactor - total * xi - math.log2(epsilon)

    top = 0.5 - e
    if excess(0.0) <= 0:
        return 0.0
    if excess(top) > 0:
        return top
    return float(optimize.brentq(excess, 0.0, top, xtol=1e-14))


def _phase_error_from_bit_error(
    stats: ObservedStats, cells: Sequence[Tuple[int, int]], e_bit: float, y11: float, m11: float, epsilon: float
) -> float:
    """Add the sampling deviation, sized by the smallest single-photon sample among ``cells``."""
    n_x = min(
        stats.sent(X, a, b) * _pair_probability(stats.alice.mean(a), stats.bob.mean(b)) * y11
        for a, b in cells
    )
    return e_bit + _sampling_deviation(e_bit, n_x, m11, epsilon)


def _clamp_phase_error(e11: float) -> float:
    if e11 > 0.5:
        logger.warning("Phase-error bound %.4f exceeds 0.5; no secret key can be extracted", e11)
        get_metrics().increment("clamps")
        return 0.5
    return max(e11, 0.0)


def estimate_e11_upper(stats: ObservedStats, M11_lower: float, sec: SecurityParams) -> float:
    """Upper bound on the single-photon phase-error rate of the Z-basis key.

    Each non-vacuum X cell gives a decoy bound on the single-photon
    bit-error rate, normalised by the single-photon yield implied by
    ``M11_lower`` and corrected for random sampling between the bases; the
    tightest one is returned. Vacuum cells enter at an error rate of 1/2,
    so more X errors never lower the bound.
    """
    return _estimate_e11(stats, M11_lower, sec)[0]


def _estimate_e11(stats: ObservedStats, M11_lower: float, sec: SecurityParams) -> Tuple[float, float]:
    if M11_lower <= 0:
        return 0.5, 0.5
    eps = sec.epsilon
    y11 = M11_lower / (stats.sent(Z, S, S) * _pair_probability(stats.alice.signal, stats.bob.signal))
    lo, hi = _x_error_gains(stats, eps)
    best_e11, best_bit = math.inf, 0.5
    for a, b in PHASE_ERROR_CELLS:
        if stats.sent(X, a, b) <= 0:
            continue
        mean_a, mean_b = stats.alice.mean(a), stats.bob.mean(b)
        r11 = _decoy_sum((hi, lo, lo, hi), mean_a, mean_b, a, b) / (mean_a * mean_b)
        e_bit = min(max(r11 / y11, 0.0), 0.5)
        e11 = _phase_error_from_bit_error(stats, [(a, b)], e_bit, y11, M11_lower, eps)
        logger.debug("Phase-error bound from X cell (%d, %d): e_bit=%.4f e11=%.4f", a, b, e_bit, e11)
        if e11 < best_e11:
            best_e11, best_bit = e11, e_bit
    if math.isinf(best_e11):
        return 0.5, 0.5
    return _clamp_phase_error(best_e11), best_bit


def _poisson_weights(mu: float, cutoff: int) -> np.ndarray:
    return sps.poisson.pmf(np.arange(cutoff + 1), mu)


def _solve_lp(c: np.ndarray, rows: list, rhs: list, bounds: list) -> np.ndarray:
    a_ub = np.array(rows)
    b_ub = np.array(rhs)
    get_metrics().increment("lp_solves")
    res = optimize.linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status == 2:
        raise InfeasibleError("Decoy linear program is infeasible: observed counts contradict the source model")
    if not res.success:
        raise InfeasibleError(f"Decoy linear program failed: {res.message}")
    return res.x


def _gain_rows(
    gains: Tuple[np.ndarray, np.ndarray], sent: np.ndarray, alice: IntensitySet, bob: IntensitySet,
    cutoff: int, scale: float, offset: int, n_vars: int, with_lower: Optional[np.ndarray] = None,
) -> Tuple[list, list]:
    """Poisson-mixture constraints per populated cell; lower rows only where ``with_lower``."""
    lo, hi = gains
    size = (cutoff + 1) ** 2
    rows: list = []
    rhs: list = []
    for a in IntensityClass:
        for b in IntensityClass:
            if sent[a, b] <= 0:
                continue
            w = np.outer(_poisson_weights(alice.mean(a), cutoff), _poisson_weights(bob.mean(b), cutoff)).ravel()
            tail = max(0.0, 1.0 - w.sum())
            norm = max(hi[a, b], 1e-300)
            row = np.zeros(n_vars)
            row[offset:offset + size] = w * scale / norm
            rows.append(row)
            rhs.append(hi[a, b] / norm)
            if (with_lower is None or with_lower[a, b]) and lo[a, b] - tail > 0:
                rows.append(-row)
                rhs.append(-(lo[a, b] - tail) / norm)
    return rows, rhs


def lp_estimate(stats: ObservedStats, sec: SecurityParams) -> Tuple[float, float]:
    """Linear-programming cross-check of the analytic decoy bounds.

    Unknowns are the yields (and X-basis error yields) of photon pairs up to
    ``sec.lp_cutoff``; mass beyond the cutoff only loosens the lower gain
    constraints. Returns ``(M11_lower, e11_upper)``.
    """
    m11, e11, _ = _lp_bounds(stats, sec)
    return m11, e11


def _lp_bounds(stats: ObservedStats, sec: SecurityParams) -> Tuple[float, float, float]:
    if stats.signal_count <= 0 or stats.sent(Z, S, S) <= 0:
        return 0.0, 0.5, 0.5
    cutoff = sec.lp_cutoff
    eps = sec.epsilon
    size = (cutoff + 1) ** 2
    idx11 = (cutoff + 1) + 1
    scale = max(float(np.max(stats.tables.coincidences[Z] / np.maximum(stats.tables.pulses_sent[Z], 1))), 1e-12)

    z_gains = _relaxed_gains(stats.tables.coincidences[Z], stats.tables.pulses_sent[Z], eps)
    rows, rhs = _gain_rows(z_gains, stats.tables.pulses_sent[Z], stats.alice, stats.bob, cutoff, scale, 0, size)
    c = np.zeros(size)
    c[idx11] = 1.0
    y = _solve_lp(c, rows, rhs, [(0.0, 1.0 / scale)] * size)
    y11 = max(float(y[idx11]) * scale, 0.0)
    p11 = _pair_probability(stats.alice.signal, stats.bob.signal)
    m11 = min(stats.sent(Z, S, S) * p11 * y11, stats.signal_count)
    if m11 <= 0:
        return 0.0, 0.5, 0.5

    # X basis: [yields | error yields], error yield never above yield.
    # Error counts only cap error yields; the vacuum cells at E = 1/2 bound them from below.
    x_scale = max(float(np.max(stats.tables.coincidences[X] / np.maximum(stats.tables.pulses_sent[X], 1))), 1e-12)
    n_vars = 2 * size
    sent_x = stats.tables.pulses_sent[X]
    x_gains = _relaxed_gains(stats.tables.coincidences[X], sent_x, eps)
    rows, rhs = _gain_rows(x_gains, sent_x, stats.alice, stats.bob, cutoff, x_scale, 0, n_vars)
    err_rows, err_rhs = _gain_rows(_x_error_gains(stats, eps), sent_x, stats.alice, stats.bob,
                                   cutoff, x_scale, size, n_vars, with_lower=_vacuum_mask())
    rows += err_rows
    rhs += err_rhs
    for k in range(size):
        row = np.zeros(n_vars)
        row[size + k] = 1.0
        row[k] = -1.0
        rows.append(row)
        rhs.append(0.0)
    c = np.zeros(n_vars)
    c[size + idx11] = -1.0
    sol = _solve_lp(c, rows, rhs, [(0.0, 1.0 / x_scale)] * n_vars)
    r11 = float(sol[size + idx11]) * x_scale
    e_bit = min(max(r11 / y11, 0.0), 0.5)
    e11 = _phase_error_from_bit_error(stats, PHASE_ERROR_CELLS, e_bit, y11, m11, eps)
    return float(m11), _clamp_phase_error(e11), e_bit


def error_correction_cost(M: float, E: float, f: float) -> float:
    if f < 1.0:
        raise DomainError(f"Error-correction inefficiency must be >= 1, got {f}")
    return float(M * f * binary_entropy(E))


def secure_key_length(M11_lower: float, e11_upper: float, K_ec: float) -> float:
    if not 0.0 <= e11_upper <= 1.0:
        raise DomainError(f"Phase-error rate must lie in [0, 1], got {e11_upper}")
    # a phase-error rate at or above one half leaves nothing secret
    entropy = binary_entropy(min(e11_upper, 0.5))
    length = M11_lower * (1.0 - entropy) - K_ec
    if length <= 0:
        logger.warning("Secure key length is non-positive (%.4g); clamping to 0", length)
        return 0.0
    return float(length)


def key_rate(K: float, duration: float) -> float:
    if duration <= 0:
        raise DomainError(f"Duration must be positive, got {duration}")
    return K / duration


def decompose(M: float, M11: float, e11: float, K_ec: float, K: float) -> RatioReport:
    """Split the raw signal-signal Z-basis count into its four consumers."""
    if M <= 0:
        raise DomainError("Ratio decomposition needs a positive signal coincidence count")
    return RatioReport(
        ec_fraction=K_ec / M,
        multiphoton_fraction=(M - M11) / M,
        phase_error_fraction=M11 * binary_entropy(min(e11, 0.5)) / M,
        final_key_fraction=K / M,
    )


def ratio_report(stats: ObservedStats, result: KeyResult) -> RatioReport:
    return decompose(stats.signal_count, result.M11_lower, result.e11_upper, result.K_ec, result.K)


def analyze(stats: ObservedStats, sec: SecurityParams, estimator: Optional[str] = None) -> KeyResult:
    """Run the full postprocessing chain on observed tables."""
    estimator = estimator or sec.estimator
    if estimator not in ESTIMATORS:
        raise ConfigurationError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    stats.validate()
    metrics = get_metrics()

    with metrics.stage("decoy_bounds"):
        if estimator == "analytic":
            m11 = estimate_M11_lower(stats, sec)
            e11, e_bit = _estimate_e11(stats, m11, sec)
        else:
            m11, e11, e_bit = _lp_bounds(stats, sec)
    cross: Dict[str, float] = {}
    if sec.lp_cross_check and estimator == "analytic":
        with metrics.stage("lp_cross_check"):
            lp_m11, lp_e11 = lp_estimate(stats, sec)
        cross = {"M11_lower": lp_m11, "e11_upper": lp_e11}
        if m11 > 0 and abs(lp_m11 - m11) > 0.25 * m11:
            logger.warning("LP and analytic M11 bounds differ by more than 25%%: %.4g vs %.4g", lp_m11, m11)

    M, E = stats.signal_count, stats.signal_qber
    k_ec = error_correction_cost(M, E, sec.f)
    secure = m11 > 0 and e11 < 0.5
    K = secure_key_length(m11, e11, k_ec) if secure else 0.0
    unclamped = m11 * (1.0 - binary_entropy(min(e11, 0.5))) - k_ec
    ratios = decompose(M, m11, e11, k_ec, K) if M > 0 else None
    result = KeyResult(
        M11_lower=m11,
        e11_upper=e11,
        K_ec=k_ec,
        K=K,
        rate=key_rate(K, stats.duration),
        ratios=ratios,
        signal_count=M,
        signal_qber=E,
        e11_bit=e_bit,
        secure=secure and K > 0,
        clamped=unclamped <= 0,
        estimator=estimator,
        cross_check=cross,
    )
    logger.info(
        "M11 >= %.5g, e11 <= %.4f, K_ec = %.5g, K = %.5g bits, rate = %.3f bps (%s)",
        m11, e11, k_ec, K, result.rate, estimator,
    )
    return result
