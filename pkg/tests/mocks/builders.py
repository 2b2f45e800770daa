from pathlib import Path

import numpy as np

from decoy import ObservedStats
from photonics import (
    ChannelDetectorParams,
    InterferenceParams,
    ModelParams,
    SessionSpec,
)
from protocol import CountTables, IntensitySet
from table_io import ingest_tables

PUBLISHED_TABLES = Path(__file__).resolve().parents[2] / "data" / "published_tables.json"

# feedback residuals: 20 ps timing, 1 pm wavelength, 0.97 polarization, 0.05 rad phase
RESIDUALS = InterferenceParams(
    timing_offset_ps=20.0,
    spectral_offset_pm=1.0,
    polarization_overlap=0.97,
    phase_misalignment=0.05,
)


def published_stats():
    return ingest_tables(PUBLISHED_TABLES)


def field_spec(seed=0, duration=65520.0, interference=RESIDUALS, chunk_size=100_000, **model):
    return SessionSpec(
        duration=duration,
        model=ModelParams(interference=interference, **model),
        seed=seed,
        chunk_size=chunk_size,
    )


def ideal_spec(seed=0, duration=3600.0, chunk_size=100_000, **model):
    channel = ChannelDetectorParams(loss_a_db=0.0, loss_b_db=0.0, dark_prob=0.0)
    return SessionSpec(
        duration=duration,
        model=ModelParams(channel=channel, interference=InterferenceParams(), **model),
        seed=seed,
        chunk_size=chunk_size,
    )


def stats_from(tables, spec):
    return ObservedStats(
        tables=tables,
        alice=spec.alice,
        bob=spec.bob,
        duration=spec.duration,
        clock_rate=spec.model.channel.clock_rate,
    )


def single_cell_tables(m=10, err=1, sent=100, cell=(0, 2, 2)):
    tables = CountTables.zeros()
    tables.coincidences[cell] = m
    tables.errors[cell] = err
    tables.pulses_sent[cell] = sent
    return tables


def uniform_tables(m=1000, err=10, sent=10**9):
    tables = CountTables.zeros()
    tables.coincidences[:] = m
    tables.errors[:] = err
    tables.pulses_sent[:] = sent
    tables.pulses_mismatched = np.full((3, 3), sent, dtype=np.int64)
    return tables


def intensities(decoy=0.07, signal=0.40):
    return IntensitySet(decoy=decoy, signal=signal)
