"""Physical model: attenuated coherent sources, asymmetric lossy links,
two-pulse interference on a 50:50 splitter and threshold detectors.

Two views of the same model are provided:

* an analytic oracle (``expected_event_probs``) giving the probability of
  each of the 16 click patterns per clock cycle, both in total and resolved
  by the photon numbers (n, m) leaving Alice and Bob;
* per-pulse Monte Carlo (``montecarlo_session``) sampling photon numbers and
  then click patterns from the oracle's photon-resolved table.

Output modes are indexed ``k = 2 * detector + time_bin`` which matches the
bit layout of ``protocol.DetectionPattern.mask``.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from errors import ConfigurationError, DomainError, PrecisionError
from logger import get_logger
from protocol import (
    PSI_MINUS_MASKS,
    PSI_PLUS_MASKS,
    Basis,
    CountTables,
    IntensityClass,
    IntensitySet,
    accumulate_arrays,
    error_table,
    sample_pulse_choices,
)
from rng import make_rng

logger = get_logger(__name__)

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
PHASE_AVERAGES = ("exact", "quadrature")


@dataclass(frozen=True)
class ChannelDetectorParams:
    loss_a_db: float = 7.9
    loss_b_db: float = 1.3
    eta_det: float = 0.40
    # single global factor fit to the signal-signal Z-basis coincidence count
    efficiency_calibration: float = 0.616
    dark_prob: float = 6e-7
    window_ns: float = 1.5
    pulse_width_ns: float = 2.5
    clock_rate: float = 75e6

    def __post_init__(self) -> None:
        if self.loss_a_db < 0 or self.loss_b_db < 0:
            raise ConfigurationError("Link losses must be non-negative")
        for name in ("eta_det", "dark_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if self.efficiency_calibration <= 0:
            raise ConfigurationError("efficiency_calibration must be positive")
        if self.pulse_width_ns <= 0 or not 0.0 <= self.window_ns <= self.pulse_width_ns:
            raise ConfigurationError("Detection window must lie within the pulse width")
        if self.clock_rate <= 0:
            raise ConfigurationError("clock_rate must be positive")
        if self.effective_efficiency > 1.0:
            raise ConfigurationError("Effective detection efficiency exceeds 1")

    @property
    def window_acceptance(self) -> float:
        return self.window_ns / self.pulse_width_ns

    @property
    def effective_efficiency(self) -> float:
        return self.eta_det * self.window_acceptance * self.efficiency_calibration

    @property
    def transmittance_a(self) -> float:
        return transmittance_from_dB(self.loss_a_db)

    @property
    def transmittance_b(self) -> float:
        return transmittance_from_dB(self.loss_b_db)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ChannelDetectorParams":
        return cls(**{k: float(v) for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class InterferenceParams:
    timing_offset_ps: float = 0.0
    pulse_width_ns: float = 2.5
    spectral_offset_pm: float = 0.0
    spectral_fwhm_pm: float = 16.0
    polarization_overlap: float = 1.0
    phase_misalignment: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.polarization_overlap <= 1.0:
            raise ConfigurationError("polarization_overlap must lie in [0, 1]")
        if self.pulse_width_ns <= 0 or self.spectral_fwhm_pm <= 0:
            raise ConfigurationError("Pulse width and spectral FWHM must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "InterferenceParams":
        return cls(**{k: float(v) for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class ModelParams:
    channel: ChannelDetectorParams = field(default_factory=ChannelDetectorParams)
    interference: InterferenceParams = field(default_factory=InterferenceParams)
    cutoff: int = 8
    phase_average: str = "exact"
    quadrature_points: int = 64
    x_flip: bool = True

    def __post_init__(self) -> None:
        if self.cutoff < 1:
            raise ConfigurationError("Photon cutoff must be at least 1")
        if self.phase_average not in PHASE_AVERAGES:
            raise ConfigurationError(f"phase_average must be one of {PHASE_AVERAGES}")
        if self.quadrature_points < 4 or self.quadrature_points % 2:
            raise ConfigurationError("quadrature_points must be an even number >= 4")


@dataclass(frozen=True)
class SessionSpec:
    duration: float = 65520.0
    alice: IntensitySet = field(default_factory=IntensitySet)
    bob: IntensitySet = field(default_factory=IntensitySet)
    model: ModelParams = field(default_factory=ModelParams)
    seed: int = 0
    chunk_size: int = 100_000

    def validate(self) -> None:
        if self.duration <= 0:
            raise ConfigurationError(f"Session duration must be positive, got {self.duration}")
        if self.chunk_size < 1:
            raise ConfigurationError("chunk_size must be positive")

    def with_interference(self, interference: InterferenceParams) -> "SessionSpec":
        return replace(self, model=replace(self.model, interference=interference))


def transmittance_from_dB(loss: float) -> float:
    if loss < 0:
        raise DomainError(f"Loss must be non-negative, got {loss} dB")
    return 10.0 ** (-loss / 10.0)


def mode_overlap(p: InterferenceParams) -> float:
    """Scalar overlap V of the two interfering pulse modes.

    Gaussian temporal and spectral envelopes give ``exp(-d^2 / (8 sigma^2))``
    for an offset d; residual phase noise of rms phi gives ``exp(-phi^2 / 2)``.
    """
    sigma_t = p.pulse_width_ns * FWHM_TO_SIGMA
    sigma_s = p.spectral_fwhm_pm * FWHM_TO_SIGMA
    dt = p.timing_offset_ps / 1000.0
    v_time = math.exp(-dt * dt / (8.0 * sigma_t * sigma_t))
    v_spec = math.exp(-p.spectral_offset_pm ** 2 / (8.0 * sigma_s * sigma_s))
    v_phase = math.exp(-p.phase_misalignment ** 2 / 2.0)
    return v_time * v_spec * p.polarization_overlap * v_phase


# -- optical network ----------------------------------------------------------

_SPLITTER_A = np.array([1.0, 1.0]) / math.sqrt(2.0)
_SPLITTER_B = np.array([1.0, -1.0]) / math.sqrt(2.0)
# row s: which of the four output modes belong to subset s
_SUBSETS = np.array([[(s >> k) & 1 for k in range(4)] for s in range(16)], dtype=float)
_SUBSET_SIZE = _SUBSETS.sum(axis=1)


def _mobius_matrix() -> np.ndarray:
    """P[C] = sum over T subset of C of (-1)^|T| Q[complement(C) | T]."""
    mob = np.zeros((16, 16))
    for clicks in range(16):
        silent = ~clicks & 0b1111
        sub = clicks
        while True:
            mob[clicks, silent | sub] += (-1) ** bin(sub).count("1")
            if sub == 0:
                break
            sub = (sub - 1) & clicks
    return mob


_MOBIUS = _mobius_matrix()


def _time_bin_amplitudes(basis: Basis, bit: int) -> np.ndarray:
    if basis is Basis.Z:
        return np.array([1.0, 0.0]) if bit == 0 else np.array([0.0, 1.0])
    sign = 1.0 if bit == 0 else -1.0
    return np.array([1.0, sign]) / math.sqrt(2.0)


def _mode_amplitudes(basis: Basis, bit: int, splitter: np.ndarray) -> np.ndarray:
    tau = _time_bin_amplitudes(basis, bit)
    return np.array([splitter[d] * tau[t] for d in (0, 1) for t in (0, 1)])


def _coupling(
    basis_pair: Tuple[Basis, Basis], bits: Tuple[int, int], params: ModelParams
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadratic-form coefficients (g11, g22, g12) of the no-click operator per subset."""
    channel = params.channel
    eta_a = channel.transmittance_a * channel.effective_efficiency
    eta_b = channel.transmittance_b * channel.effective_efficiency
    overlap = mode_overlap(params.interference)
    c_a = _mode_amplitudes(basis_pair[0], bits[0], _SPLITTER_A)
    c_b = _mode_amplitudes(basis_pair[1], bits[1], _SPLITTER_B)
    g11 = eta_a * (_SUBSETS @ np.abs(c_a) ** 2)
    g22 = eta_b * (_SUBSETS @ np.abs(c_b) ** 2)
    g12 = overlap * math.sqrt(eta_a * eta_b) * (_SUBSETS @ (np.conj(c_a) * c_b))
    return g11, g22, g12


def _no_click_fock(g11: np.ndarray, g22: np.ndarray, g12: np.ndarray, cutoff: int) -> np.ndarray:
    """No-click probability per subset for Fock inputs |n>|m>, shape (16, N+1, N+1)."""
    n = np.arange(cutoff + 1)
    g12sq = np.abs(g12) ** 2
    out = np.zeros((16, cutoff + 1, cutoff + 1))
    for k in range(cutoff + 1):
        valid = n >= k
        exponent = np.maximum(n - k, 0)
        a = np.where(valid, special.comb(n, k) * (1.0 - g11[:, None]) ** exponent, 0.0)
        b = np.where(valid, special.comb(n, k) * (1.0 - g22[:, None]) ** exponent, 0.0)
        out += (g12sq ** k)[:, None, None] * a[:, :, None] * b[:, None, :]
    return out


def _no_click_coherent(
    g11: np.ndarray, g22: np.ndarray, g12: np.ndarray, x: float, y: float
) -> np.ndarray:
    z = 2.0 * np.abs(g12) * math.sqrt(x * y)
    return np.exp(-g11 * x - g22 * y + z) * special.i0e(z)


def _no_click_quadrature(
    g11: np.ndarray, g22: np.ndarray, g12: np.ndarray, x: float, y: float, points: int
) -> np.ndarray:
    def grid(npts: int) -> np.ndarray:
        phi = 2.0 * math.pi * np.arange(npts) / npts
        cross = 2.0 * math.sqrt(x * y) * np.abs(g12)[:, None] * np.cos(phi)[None, :]
        return np.exp(-(g11 * x + g22 * y)[:, None] - cross).mean(axis=1)

    fine = grid(points)
    coarse = grid(points // 2)
    if np.max(np.abs(fine - coarse)) > 1e-12:
        logger.warning(
            "Phase quadrature not converged at %d points (delta %.3g)",
            points, float(np.max(np.abs(fine - coarse))),
        )
    return fine


def _dark_factor(dark_prob: float) -> np.ndarray:
    return (1.0 - dark_prob) ** _SUBSET_SIZE


@lru_cache(maxsize=256)
def _photon_resolved(basis_pair: Tuple[Basis, Basis], params: ModelParams) -> np.ndarray:
    """Pattern probabilities given photon numbers, shape (2, 2, N+1, N+1, 16)."""
    out = np.zeros((2, 2, params.cutoff + 1, params.cutoff + 1, 16))
    dark = _dark_factor(params.channel.dark_prob)
    for bit_a in (0, 1):
        for bit_b in (0, 1):
            g11, g22, g12 = _coupling(basis_pair, (bit_a, bit_b), params)
            q = _no_click_fock(g11, g22, g12, params.cutoff) * dark[:, None, None]
            out[bit_a, bit_b] = np.einsum("cs,snm->nmc", _MOBIUS, q)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class EventProbabilities:
    """Per-clock pattern probabilities for one intensity pair and basis pair.

    ``patterns[bit_a, bit_b, mask]`` is exact (closed-form or quadrature phase
    average); ``photon_resolved[bit_a, bit_b, n, m, mask]`` is conditional on
    the photon numbers and truncated at the cutoff, so the weighted sum of it
    differs from ``patterns`` by at most ``truncation_bound``.
    """

    mu_a: float
    mu_b: float
    basis_pair: Tuple[Basis, Basis]
    patterns: np.ndarray
    photon_resolved: np.ndarray
    photon_weights: np.ndarray
    truncation_bound: float
    x_flip: bool = True

    def pattern_distribution(self) -> np.ndarray:
        """Pattern probabilities averaged over the uniform bit choices."""
        return self.patterns.mean(axis=(0, 1))

    def psi_minus_probability(self) -> float:
        return float(self.pattern_distribution()[list(PSI_MINUS_MASKS)].sum())

    def psi_plus_probability(self) -> float:
        return float(self.pattern_distribution()[list(PSI_PLUS_MASKS)].sum())

    def _error_weights(self) -> np.ndarray:
        if self.basis_pair[0] != self.basis_pair[1]:
            raise DomainError("Error probabilities are defined for matched bases only")
        return error_table(self.x_flip)[int(self.basis_pair[0])].astype(float)

    def error_probability(self) -> float:
        psi = self.patterns[..., list(PSI_MINUS_MASKS)].sum(axis=-1)
        return float((psi * self._error_weights()).sum() / 4.0)

    def truncated_patterns(self) -> np.ndarray:
        return np.einsum("nm,abnmc->abc", self.photon_weights, self.photon_resolved)

    def yield_nm(self, n: int, m: int) -> float:
        """P(psi- | n photons from Alice, m from Bob), averaged over bits."""
        psi = self.photon_resolved[:, :, n, m, list(PSI_MINUS_MASKS)].sum(axis=-1)
        return float(psi.mean())

    def error_yield_nm(self, n: int, m: int) -> float:
        psi = self.photon_resolved[:, :, n, m, list(PSI_MINUS_MASKS)].sum(axis=-1)
        return float((psi * self._error_weights()).sum() / 4.0)

    def single_photon_yield(self) -> float:
        return self.yield_nm(1, 1)


def expected_event_probs(
    mu_a: float,
    mu_b: float,
    basis_pair: Tuple[Basis, Basis],
    params: ModelParams,
    tolerance: Optional[float] = None,
) -> EventProbabilities:
    if mu_a < 0 or mu_b < 0:
        raise DomainError(f"Intensities must be non-negative, got {mu_a}, {mu_b}")
    basis_pair = (Basis(basis_pair[0]), Basis(basis_pair[1]))
    cutoff = params.cutoff
    weights_a = stats.poisson.pmf(np.arange(cutoff + 1), mu_a)
    weights_b = stats.poisson.pmf(np.arange(cutoff + 1), mu_b)
    truncation_bound = max(0.0, 1.0 - weights_a.sum() * weights_b.sum())
    if tolerance is not None and truncation_bound > tolerance:
        raise PrecisionError(
            f"Photon cutoff {cutoff} leaves {truncation_bound:.3g} unaccounted probability "
            f"(tolerance {tolerance:.3g}) at intensities ({mu_a}, {mu_b})"
        )

    dark = _dark_factor(params.channel.dark_prob)
    patterns = np.zeros((2, 2, 16))
    for bit_a in (0, 1):
        for bit_b in (0, 1):
            g11, g22, g12 = _coupling(basis_pair, (bit_a, bit_b), params)
            if params.phase_average == "exact":
                q = _no_click_coherent(g11, g22, g12, mu_a, mu_b)
            else:
                q = _no_click_quadrature(g11, g22, g12, mu_a, mu_b, params.quadrature_points)
            patterns[bit_a, bit_b] = _MOBIUS @ (q * dark)

    result = EventProbabilities(
        mu_a=mu_a,
        mu_b=mu_b,
        basis_pair=basis_pair,
        patterns=patterns,
        photon_resolved=_photon_resolved(basis_pair, params),
        photon_weights=np.outer(weights_a, weights_b),
        truncation_bound=truncation_bound,
        x_flip=params.x_flip,
    )
    gap = float(np.max(np.abs(result.truncated_patterns() - patterns)))
    if gap > truncation_bound + 1e-9:
        logger.warning(
            "Photon expansion disagrees with phase average by %.3g (bound %.3g)", gap, truncation_bound
        )
    return result


# -- session-level expectations -------------------------------------------------

CellProbabilities = Dict[Tuple[int, int, int], EventProbabilities]


def cell_probabilities(spec: SessionSpec) -> CellProbabilities:
    """Oracle for all nine intensity cells of both matched bases."""
    probs: CellProbabilities = {}
    for basis in Basis:
        for ia in IntensityClass:
            for ib in IntensityClass:
                probs[(int(basis), int(ia), int(ib))] = expected_event_probs(
                    spec.alice.mean(ia), spec.bob.mean(ib), (basis, basis), spec.model
                )
    return probs


def scale_to_session(
    probs: CellProbabilities, spec: SessionSpec, duration: Optional[float] = None
) -> CountTables:
    """Expected (unrounded) tables for ``duration`` seconds of clocked operation."""
    duration = spec.duration if duration is None else duration
    if duration < 0:
        raise ConfigurationError(f"Duration must be non-negative, got {duration}")
    total = spec.model.channel.clock_rate * duration
    pa, pb = spec.alice.probabilities, spec.bob.probabilities
    tables = CountTables.zeros(dtype=float)
    tables.pulses_mismatched = total * np.outer(pa, pb) * 0.5
    for (basis, ia, ib), ev in probs.items():
        sent = total * pa[ia] * pb[ib] * 0.25
        cell = (basis, ia, ib)
        tables.pulses_sent[cell] = sent
        tables.coincidences[cell] = sent * ev.psi_minus_probability()
        tables.errors[cell] = sent * ev.error_probability()
        tables.psi_plus[cell] = sent * ev.psi_plus_probability()
        single = sent * ev.photon_weights[1, 1]
        tables.true_m11[cell] = single * ev.yield_nm(1, 1)
        tables.true_err11[cell] = single * ev.error_yield_nm(1, 1)
    return tables


def realize_tables(expected: CountTables, rng: np.random.Generator) -> CountTables:
    """Draw integer tables around expected counts.

    Single-photon and remaining coincidences are independent Poisson
    variates; errors are binomial thinnings with the expected error ratios.
    """
    m11 = rng.poisson(expected.true_m11)
    rest_mean = np.clip(expected.coincidences - expected.true_m11, 0.0, None)
    rest = rng.poisson(rest_mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio11 = np.where(expected.true_m11 > 0, expected.true_err11 / expected.true_m11, 0.0)
        ratio_rest = np.where(
            rest_mean > 0, (expected.errors - expected.true_err11) / np.where(rest_mean > 0, rest_mean, 1.0), 0.0
        )
    err11 = rng.binomial(m11, np.clip(ratio11, 0.0, 1.0))
    err_rest = rng.binomial(rest, np.clip(ratio_rest, 0.0, 1.0))
    sent = np.rint(expected.pulses_sent).astype(np.int64)
    return CountTables(
        coincidences=np.minimum(m11 + rest, sent).astype(np.int64),
        errors=np.minimum(err11 + err_rest, m11 + rest).astype(np.int64),
        pulses_sent=sent,
        pulses_mismatched=np.rint(expected.pulses_mismatched).astype(np.int64),
        psi_plus=rng.poisson(expected.psi_plus).astype(np.int64),
        true_m11=m11.astype(np.int64),
        true_err11=err11.astype(np.int64),
    )


def sample_session_tables(spec: SessionSpec, probs: Optional[CellProbabilities] = None) -> CountTables:
    spec.validate()
    probs = probs if probs is not None else cell_probabilities(spec)
    return realize_tables(scale_to_session(probs, spec), make_rng(spec.seed, "session"))


def session_tables_from_blocks(
    spec: SessionSpec, blocks: Iterable[Tuple[InterferenceParams, float]], precision: int = 5
) -> CountTables:
    """Expected tables summed over QKD blocks with their own interference state.

    Blocks whose overlap agrees to ``precision`` decimals share one oracle
    evaluation.
    """
    groups: Dict[float, Tuple[InterferenceParams, float]] = {}
    for params, duration in blocks:
        key = round(mode_overlap(params), precision)
        first, total = groups.get(key, (params, 0.0))
        groups[key] = (first, total + duration)
    tables = CountTables.zeros(dtype=float)
    for params, duration in groups.values():
        block_spec = spec.with_interference(params)
        tables = tables + scale_to_session(cell_probabilities(block_spec), block_spec, duration)
    logger.info("Summed expected counts over %d distinct overlap groups", len(groups))
    return tables


# -- per-pulse Monte Carlo ----------------------------------------------------------

@lru_cache(maxsize=32)
def _pattern_cdfs(params: ModelParams) -> np.ndarray:
    """Cumulative pattern tables ``[basis_a, basis_b, bit_a, bit_b, n, m, mask]``."""
    size = params.cutoff + 1
    table = np.zeros((2, 2, 2, 2, size, size, 16))
    for ba in Basis:
        for bb in Basis:
            table[int(ba), int(bb)] = _photon_resolved((ba, bb), params)
    table = np.clip(table, 0.0, None)
    table /= table.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(table, axis=-1)
    cdf[..., -1] = 1.0
    return cdf


def chunk_sizes(n_pulses: int, chunk_size: int) -> List[int]:
    full, rest = divmod(n_pulses, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def simulate_chunk(spec: SessionSpec, index: int, size: int) -> CountTables:
    """Simulate one chunk on its own seeded sub-stream."""
    rng = make_rng(spec.seed, "montecarlo", index)
    alice = sample_pulse_choices(spec.alice, rng, size)
    bob = sample_pulse_choices(spec.bob, rng, size)
    n = rng.poisson(spec.alice.means[alice[0]])
    m = rng.poisson(spec.bob.means[bob[0]])
    cutoff = spec.model.cutoff
    cdf = _pattern_cdfs(spec.model)[
        alice[1], bob[1], alice[2], bob[2], np.minimum(n, cutoff), np.minimum(m, cutoff)
    ]
    u = rng.random(size)
    patterns = np.minimum((u[:, None] >= cdf).sum(axis=1), 15)
    return accumulate_arrays(alice, bob, patterns, (n == 1) & (m == 1), spec.model.x_flip)


def simulate_chunks(spec: SessionSpec, n_pulses: int, indices: Sequence[int]) -> CountTables:
    sizes = chunk_sizes(n_pulses, spec.chunk_size)
    tables = CountTables.zeros()
    for index in indices:
        tables = tables + simulate_chunk(spec, index, sizes[index])
    return tables


def _simulate_chunk_args(args: Tuple[SessionSpec, int, int]) -> CountTables:
    return simulate_chunk(*args)


def montecarlo_session(spec: SessionSpec, n_pulses: int, workers: int = 1) -> CountTables:
    """Per-pulse simulation of ``n_pulses`` clock cycles.

    Chunks use independent sub-streams keyed by chunk index, so the result
    does not depend on ``workers`` or on how chunks are grouped.
    """
    if n_pulses < 1:
        raise ConfigurationError(f"n_pulses must be at least 1, got {n_pulses}")
    spec.validate()
    sizes = chunk_sizes(n_pulses, spec.chunk_size)
    jobs = [(spec, index, size) for index, size in enumerate(sizes)]
    tables = CountTables.zeros()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_simulate_chunk_args, jobs):
                tables = tables + part
    else:
        for job in jobs:
            tables = tables + simulate_chunk(*job)
    logger.info("Simulated %d pulses in %d chunks (seed %d)", n_pulses, len(jobs), spec.seed)
    return tables
