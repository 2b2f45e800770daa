"""Plain-text reproduction log with hash chaining.

One ``step key=value ...`` line per pipeline step, each suffixed with
``| HASH: sha256(previous_hash + line)``. Lines carry no timestamps so the
same configuration and seed always produce the same file.
"""

import os
from pathlib import Path
from typing import Any, List, Union

from logger import HASH_SEPARATOR, chain_digest, get_logger

logger = get_logger(__name__)

SEPARATOR = HASH_SEPARATOR


def _format(value: Any) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value).replace(" ", "_")


class ReproductionLog:
    """Collects chained entries in memory and writes them atomically."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self.prev_hash = ""
        self.lines: List[str] = []

    def record(self, step: str, **fields: Any) -> str:
        line = " ".join([step] + [f"{k}={_format(v)}" for k, v in sorted(fields.items())])
        digest = chain_digest(self.prev_hash, line)
        self.prev_hash = digest
        self.lines.append(f"{line}{SEPARATOR}{digest}")
        return digest

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w") as f:
            f.write("\n".join(self.lines) + "\n")
        os.replace(tmp, self.path)
        logger.info("Reproduction log written to %s (%d entries)", self.path, len(self.lines))


def verify_chain(path: Union[str, Path]) -> bool:
    """Return True when every line's hash matches its content and predecessor."""
    prev = ""
    with open(path) as f:
        for raw in f:
            raw = raw.rstrip("\n")
            if not raw:
                continue
            line, sep, digest = raw.rpartition(SEPARATOR)
            if not sep or chain_digest(prev, line) != digest:
                return False
            prev = digest
    return True
