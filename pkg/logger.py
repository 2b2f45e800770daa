"""Application logging.

Every file handler chains its lines: each line ends in
``| HASH: sha256(previous_hash + line)`` so a log can be checked for edits
with :func:`audit.verify_chain`. The rotating application log lives under
``MDIQKD_BASE_DIR``; a run can additionally mirror its records into the
output directory with :func:`run_log`.
"""

import hashlib
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Iterator, Optional, Union

HASH_SEPARATOR = " | HASH: "

_FORMAT = logging.Formatter('[%(asctime)s] %(levelname)s %(name)s - %(message)s')
_CONSOLE_FORMAT = logging.Formatter('%(levelname)s %(name)s - %(message)s')
_configured = False


def chain_digest(prev_hash: str, line: str) -> str:
    return hashlib.sha256((prev_hash + line).encode()).hexdigest()


@dataclass(frozen=True)
class LogSettings:
    base_dir: Path
    level: str = "INFO"
    backup_count: int = 7

    @property
    def log_path(self) -> Path:
        return self.base_dir / "logs" / "mdiqkd.log"

    @property
    def chain_path(self) -> Path:
        return self.log_path.parent / "log_chain.txt"

    @classmethod
    def from_env(cls) -> "LogSettings":
        base = Path(os.environ.get("MDIQKD_BASE_DIR", str(Path.home() / ".mdiqkd")))
        return cls(base_dir=base, level=os.environ.get("MDIQKD_LOG_LEVEL", "INFO").upper())


class _ChainMixin:
    """Writes formatted records with a running hash suffix."""

    prev_hash = ''

    def _write_chained(self, record: logging.LogRecord) -> None:
        line = self.format(record)  # type: ignore[attr-defined]
        self.prev_hash = chain_digest(self.prev_hash, line)
        self.stream.write(f"{line}{HASH_SEPARATOR}{self.prev_hash}{self.terminator}")  # type: ignore[attr-defined]
        self.flush()  # type: ignore[attr-defined]


class HashChainingHandler(_ChainMixin, TimedRotatingFileHandler):
    """Rotating application log; the last hash of each handler lifetime goes to ``chain_file``."""

    def __init__(self, filename: str, chain_file: Path, **kwargs) -> None:
        super().__init__(filename, **kwargs)
        self.chain_file = chain_file

    def emit(self, record: logging.LogRecord) -> None:  # type: ignore[override]
        try:
            if self.shouldRollover(record):
                self.doRollover()
            if self.stream is None:
                self.stream = self._open()
            self._write_chained(record)
        except Exception:
            self.handleError(record)

    def close(self) -> None:  # type: ignore[override]
        super().close()
        if not self.prev_hash:
            return
        try:
            self.chain_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.chain_file, 'a') as f:
                f.write(self.prev_hash + '\n')
        except OSError:
            pass


class RunLogHandler(_ChainMixin, logging.FileHandler):
    """Chained, non-rotating log of a single run."""

    def __init__(self, filename: Union[str, Path]) -> None:
        super().__init__(str(filename), mode='w', delay=True)

    def emit(self, record: logging.LogRecord) -> None:  # type: ignore[override]
        try:
            if self.stream is None:
                self.stream = self._open()
            self._write_chained(record)
        except Exception:
            self.handleError(record)


def _configure(settings: Optional[LogSettings] = None) -> None:
    global _configured
    if _configured:
        return
    settings = settings or LogSettings.from_env()
    root = logging.getLogger()
    root.setLevel(settings.level)
    try:
        settings.log_path.parent.mkdir(parents=True, exist_ok=True)
        handler = HashChainingHandler(str(settings.log_path), settings.chain_path,
                                      when='midnight', backupCount=settings.backup_count)
        handler.setFormatter(_FORMAT)
        root.addHandler(handler)
    except OSError as exc:  # pragma: no cover - read-only base dir
        sys.stderr.write(f"mdiqkd: file logging disabled ({exc})\n")
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING)
    console.setFormatter(_CONSOLE_FORMAT)
    root.addHandler(console)
    _configured = True


def get_logger(name: str) -> logging.Logger:
    """Return a logger with the given name after configuring logging."""
    _configure()
    return logging.getLogger(name)


@contextmanager
def run_log(path: Union[str, Path]) -> Iterator[RunLogHandler]:
    """Mirror root-logger records into ``path`` for the duration of the block."""
    _configure()
    handler = RunLogHandler(path)
    handler.setFormatter(_FORMAT)
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        handler.close()
