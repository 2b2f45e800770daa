"""Read and write coincidence tables as versioned, hand-auditable JSON."""

import json
import math
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from dateutil import parser as date_parser

from decoy import ObservedStats
from errors import ValidationError
from logger import get_logger
from protocol import Basis, CountTables, IntensityClass, IntensitySet

logger = get_logger(__name__)

SCHEMA_VERSION = 1
CELL_KEYS = ("basis", "alice", "bob", "coincidences")
DIAGNOSTIC_FIELDS = ("psi_plus", "true_m11", "true_err11")


def _cell_id(cell: Dict[str, Any]) -> Tuple[int, int, int]:
    try:
        return (
            int(Basis.from_label(str(cell["basis"]))),
            int(IntensityClass.from_label(str(cell["alice"]))),
            int(IntensityClass.from_label(str(cell["bob"]))),
        )
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"Malformed cell {cell!r}: {exc}") from exc


def _labels(idx: Tuple[int, int, int]) -> Tuple[str, str, str]:
    return Basis(idx[0]).name, IntensityClass(idx[1]).label, IntensityClass(idx[2]).label


def _as_count(value: Any, what: str, idx: Tuple[int, int, int]) -> int:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{what} is not a number: {value!r}", _labels(idx))
    if not math.isfinite(number) or number < 0 or abs(number - round(number)) > 1e-6:
        raise ValidationError(f"{what} must be a non-negative integer, got {value!r}", _labels(idx))
    return int(round(number))


def _as_rate(value: Any, idx: Tuple[int, int, int]) -> float:
    try:
        rate = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"qber is not a number: {value!r}", _labels(idx))
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"qber must lie in [0, 1], got {value!r}", _labels(idx))
    return rate


def _read_metadata_extras(meta: Dict[str, Any]) -> Tuple[Optional[int], Optional[datetime]]:
    decimals = meta.get("qber_decimals")
    try:
        decimals = int(decimals) if decimals is not None else None
        acquired_at = date_parser.isoparse(meta["acquired_at"]) if meta.get("acquired_at") else None
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"Invalid table metadata: {exc}") from exc
    if decimals is not None and decimals < 0:
        raise ValidationError(f"qber_decimals must be non-negative, got {decimals}")
    return decimals, acquired_at


def _read_document(path: Path) -> Dict[str, Any]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"Cannot read table file {path}: {exc}") from exc
    if not text.strip():
        raise ValidationError(f"Table file {path} is empty")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"Table file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"Table file {path} must hold a JSON object")
    return data


def parse_tables(data: Dict[str, Any]) -> ObservedStats:
    """Build ObservedStats from a decoded table document."""
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"Unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    meta = data.get("metadata")
    cells = data.get("cells")
    if not isinstance(meta, dict) or not isinstance(cells, list):
        raise ValidationError("Table document needs 'metadata' and 'cells'")
    try:
        alice = IntensitySet.from_dict(meta["alice"])
        bob = IntensitySet.from_dict(meta["bob"])
        duration = float(meta["duration_s"])
        clock_rate = float(meta.get("clock_rate", 75e6))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"Invalid table metadata: {exc}") from exc
    decimals, acquired_at = _read_metadata_extras(meta)
    total_pulses = clock_rate * duration

    tables = CountTables.zeros()
    seen = set()
    for cell in cells:
        if not isinstance(cell, dict):
            raise ValidationError(f"Cell entries must be JSON objects, got {cell!r}")
        missing = [k for k in CELL_KEYS if k not in cell]
        if missing:
            raise ValidationError(f"Cell {cell!r} lacks {missing}")
        idx = _cell_id(cell)
        if idx in seen:
            raise ValidationError("Duplicate cell", _labels(idx))
        seen.add(idx)
        m = _as_count(cell["coincidences"], "coincidences", idx)
        qber = _as_rate(cell["qber"], idx) if cell.get("qber") is not None else None
        if "errors" in cell:
            err = _as_count(cell["errors"], "errors", idx)
            if qber is not None and m > 0:
                # quoted QBERs carry their rounding; unrounded ones only float noise
                rounding = 0.5 * 10.0 ** (-decimals) if decimals is not None else 0.0
                tolerance = rounding + 0.5 / m + 1e-12
                if abs(qber - err / m) > tolerance:
                    raise ValidationError(
                        f"QBER {qber} contradicts counts {err}/{m} (tolerance {tolerance:.3g})", _labels(idx)
                    )
        elif qber is not None:
            err = int(round(qber * m))
        else:
            raise ValidationError("Cell needs 'errors' or 'qber'", _labels(idx))
        if "pulses_sent" in cell:
            sent = _as_count(cell["pulses_sent"], "pulses_sent", idx)
        else:
            sent = int(round(total_pulses * alice.probabilities[idx[1]] * bob.probabilities[idx[2]] * 0.25))
        tables.coincidences[idx] = m
        tables.errors[idx] = err
        tables.pulses_sent[idx] = sent
        for name in DIAGNOSTIC_FIELDS:
            if name in cell:
                getattr(tables, name)[idx] = _as_count(cell[name], name, idx)

    expected = {(int(b), int(a), int(c)) for b in Basis for a in IntensityClass for c in IntensityClass}
    absent = sorted(expected - seen)
    if absent:
        raise ValidationError(f"{len(absent)} cells missing", _labels(absent[0]))

    diagnostics = data.get("diagnostics") or {}
    if "pulses_mismatched" in diagnostics:
        try:
            mismatched = np.asarray(diagnostics["pulses_mismatched"], dtype=np.float64).reshape(3, 3)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"diagnostics.pulses_mismatched must be a 3x3 table: {exc}") from exc
        if not np.all(np.isfinite(mismatched)) or np.any(mismatched < 0):
            raise ValidationError("diagnostics.pulses_mismatched must be non-negative")
        tables.pulses_mismatched = np.rint(mismatched).astype(np.int64)
    else:
        tables.pulses_mismatched = np.rint(
            total_pulses * np.outer(alice.probabilities, bob.probabilities) * 0.5
        ).astype(np.int64)

    stats = ObservedStats(
        tables=tables,
        alice=alice,
        bob=bob,
        duration=duration,
        clock_rate=clock_rate,
        rounded=bool(data.get("rounded", False)),
        qber_decimals=decimals,
        acquired_at=acquired_at,
    )
    stats.validate()
    return stats


def ingest_tables(path: Union[str, Path]) -> ObservedStats:
    path = Path(path)
    stats = parse_tables(_read_document(path))
    logger.info(
        "Loaded tables from %s: M_z(signal, signal) = %d, E = %.4f%s",
        path, stats.signal_count, stats.signal_qber, " (rounded)" if stats.rounded else "",
    )
    return stats


def _qber(value: float, decimals: Optional[int]) -> float:
    if math.isnan(value):
        return 0.0
    return round(value, decimals) if decimals is not None else value


def tables_document(stats: ObservedStats) -> Dict[str, Any]:
    t = stats.tables
    qbers = t.qber_table()
    cells: List[Dict[str, Any]] = []
    for b in Basis:
        for a in IntensityClass:
            for c in IntensityClass:
                idx = (int(b), int(a), int(c))
                m, err = int(t.coincidences[idx]), int(t.errors[idx])
                cell: Dict[str, Any] = {
                    "basis": b.name,
                    "alice": a.label,
                    "bob": c.label,
                    "coincidences": m,
                    "errors": err,
                    "qber": _qber(float(qbers[idx]), stats.qber_decimals),
                    "pulses_sent": int(t.pulses_sent[idx]),
                }
                for name in DIAGNOSTIC_FIELDS:
                    value = int(getattr(t, name)[idx])
                    if value:
                        cell[name] = value
                cells.append(cell)
    meta: Dict[str, Any] = {
        "alice": stats.alice.to_dict(),
        "bob": stats.bob.to_dict(),
        "duration_s": stats.duration,
        "clock_rate": stats.clock_rate,
    }
    if stats.qber_decimals is not None:
        meta["qber_decimals"] = stats.qber_decimals
    if stats.acquired_at is not None:
        meta["acquired_at"] = stats.acquired_at.isoformat()
    return {
        "schema_version": SCHEMA_VERSION,
        "rounded": stats.rounded,
        "metadata": meta,
        "cells": cells,
        "diagnostics": {"pulses_mismatched": t.pulses_mismatched.astype(np.int64).tolist()},
    }


def write_json(path: Union[str, Path], data: Dict[str, Any]) -> None:
    """Write JSON atomically (tmp file + rename); keys sorted for stable bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except OSError:
        if tmp.exists():
            try:
                os.remove(tmp)
            except OSError:
                pass
        raise


def export_tables(stats: ObservedStats, path: Union[str, Path]) -> None:
    stats.validate()
    write_json(path, tables_document(stats))
    logger.info("Wrote tables to %s", path)
