"""Run metrics for the MDIQKD toolkit: stage timings and counters."""

import json
import os
import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

from logger import get_logger


def _default_metrics_path() -> Path:
    """Return metrics file path based on MDIQKD_OUTPUT_DIR."""
    base = Path(os.environ.get("MDIQKD_OUTPUT_DIR", "output"))
    return base / "metrics.json"


class RunMetrics:
    """Singleton class collecting per-run metrics."""

    _instance = None

    def __new__(cls, path: Optional[Path] = None) -> "RunMetrics":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._init(path or _default_metrics_path())
        return cls._instance

    def _init(self, path: Path) -> None:
        self.path = path
        self.start = time.time()
        self.stages: Dict[str, float] = {}
        self.counters: Dict[str, int] = {}
        self.lock = threading.Lock()
        self.logger = get_logger(__name__)

    @classmethod
    def reset_instance(cls) -> None:
        """Reset the singleton instance (for tests)."""
        cls._instance = None

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Time a pipeline stage; repeated stages accumulate."""
        t0 = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - t0
            with self.lock:
                self.stages[name] = self.stages.get(name, 0.0) + elapsed
            self.logger.debug("stage %s took %.3f s", name, elapsed)

    def increment(self, name: str, amount: int = 1) -> None:
        with self.lock:
            self.counters[name] = self.counters.get(name, 0) + amount

    def snapshot(self) -> Dict[str, Any]:
        """Return metrics snapshot dict."""
        with self.lock:
            return {
                "stages_sec": dict(self.stages),
                "counters": dict(self.counters),
                "uptime_sec": round(time.time() - self.start, 3),
            }

    def write_metrics(self, path: Optional[Path] = None) -> None:
        """Write metrics snapshot atomically."""
        target = Path(path) if path is not None else self.path
        data = self.snapshot()
        tmp = target.with_suffix(".tmp")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "w") as f:
                json.dump(data, f, indent=2, sort_keys=True)
            os.replace(tmp, target)
        except Exception as exc:  # pragma: no cover - disk issues
            self.logger.error("Failed to write metrics: %s", exc)
            try:
                tmp.unlink()
            except OSError:
                pass


def get_metrics(path: Optional[Path] = None) -> RunMetrics:
    """Return the singleton metrics manager."""
    return RunMetrics(path)
