"""Layered run configuration: built-in defaults, config file, CLI overrides."""

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

from decoy import SecurityParams
from errors import ConfigurationError
from feedback import ControllerConfig, DriftModel
from logger import get_logger
from photonics import ChannelDetectorParams, InterferenceParams, ModelParams, SessionSpec
from protocol import IntensitySet

MODES = ("simulate", "analyze", "pipeline", "feedback-demo", "report")
STOCHASTIC_MODES = ("simulate", "pipeline", "feedback-demo")
INPUT_MODES = ("analyze", "report")
ENGINES = ("session", "montecarlo")


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Return a copy of ``base`` with ``update`` merged in, recursing into dicts."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigManager:
    """Load and validate parameter sections for a run."""

    DEFAULT_CONFIG: Dict[str, Any] = {
        "intensities": {
            "alice": IntensitySet().to_dict(),
            "bob": IntensitySet().to_dict(),
        },
        "session": {
            "duration_s": 65520.0,
            "engine": "session",
            "n_pulses": 1_000_000,
            "chunk_size": 100_000,
            "workers": 1,
            "use_feedback": True,
        },
        "channel": {},
        "interference": {},
        "model": {},
        "drift": {},
        "feedback": {},
        "security": {},
    }

    def __init__(self, config_path: Union[str, Path] = "config/config.json",
                 user_path: Optional[Union[str, Path]] = None) -> None:
        self.config_path = Path(config_path)
        self.logger = get_logger(__name__)
        self.config = deep_merge(self.DEFAULT_CONFIG, self._load_json(self.config_path, {}))
        if user_path is not None:
            user = Path(user_path)
            if not user.exists():
                raise ConfigurationError(f"Config file {user} does not exist")
            self.config = deep_merge(self.config, self._load_json(user, None, strict=True))
        unknown = set(self.config) - set(self.DEFAULT_CONFIG)
        if unknown:
            raise ConfigurationError(f"Unknown config sections: {sorted(unknown)}")

    def _load_json(self, path: Path, default: Optional[Dict[str, Any]],
                   strict: bool = False) -> Dict[str, Any]:
        if path.exists():
            try:
                with open(path, "r") as file:
                    data = json.load(file)
                if not isinstance(data, dict):
                    raise ValueError("top level must be an object")
                return data
            except Exception as exc:
                if strict:
                    raise ConfigurationError(f"Failed loading {path}: {exc}") from exc
                self.logger.exception("Failed loading %s: %s", path, exc)
        return dict(default or {})

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """Set dotted ``section.key`` values, e.g. ``security.f``."""
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in self.config or not key:
                raise ConfigurationError(f"Unknown config key: {dotted}")
            target = self.config[section]
            parts = key.split(".")
            for part in parts[:-1]:
                target = target.setdefault(part, {})
            target[parts[-1]] = value

    def get(self, section: str) -> Dict[str, Any]:
        return copy.deepcopy(self.config[section])

    def save(self, path: Union[str, Path]) -> None:
        """Persist the merged configuration atomically with backup."""
        path = Path(path)
        backup = path.parent / f"{path.stem}_backup.json"
        tmp = path.with_suffix(".tmp")
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            with open(tmp, "w") as f:
                json.dump(self.config, f, indent=2, sort_keys=True)
            if path.exists():
                backup.write_text(path.read_text())
            os.replace(tmp, path)
        except OSError as exc:  # pragma: no cover - disk issues
            self.logger.exception("Failed writing config file: %s", exc)
            if tmp.exists():
                try:
                    os.remove(tmp)
                except OSError:
                    pass
            raise

    # -- typed views ------------------------------------------------------

    def model_params(self) -> ModelParams:
        model = self.config["model"]
        return ModelParams(
            channel=ChannelDetectorParams.from_dict(self.config["channel"]),
            interference=InterferenceParams.from_dict(self.config["interference"]),
            cutoff=int(model.get("cutoff", 8)),
            phase_average=str(model.get("phase_average", "exact")),
            quadrature_points=int(model.get("quadrature_points", 64)),
            x_flip=bool(model.get("x_flip", True)),
        )

    def session_spec(self, seed: int) -> SessionSpec:
        session = self.config["session"]
        intensities = self.config["intensities"]
        spec = SessionSpec(
            duration=float(session["duration_s"]),
            alice=IntensitySet.from_dict(intensities["alice"]),
            bob=IntensitySet.from_dict(intensities["bob"]),
            model=self.model_params(),
            seed=int(seed),
            chunk_size=int(session["chunk_size"]),
        )
        spec.validate()
        return spec

    def security_params(self) -> SecurityParams:
        return SecurityParams.from_dict(self.config["security"])

    def drift_model(self) -> DriftModel:
        return DriftModel.from_dict(self.config["drift"])

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig.from_dict(self.config["feedback"])

    @property
    def engine(self) -> str:
        engine = str(self.config["session"]["engine"])
        if engine not in ENGINES:
            raise ConfigurationError(f"engine must be one of {ENGINES}, got {engine!r}")
        return engine


@dataclass
class RunConfig:
    mode: str
    output_dir: Path = field(default_factory=lambda: Path(os.environ.get("MDIQKD_OUTPUT_DIR", "output")))
    input_path: Optional[Path] = None
    seed: Optional[int] = None
    config_path: Optional[Path] = None
    overrides: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"Unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode in STOCHASTIC_MODES and self.seed is None:
            raise ConfigurationError(f"Mode {self.mode!r} needs an explicit seed")
        if self.seed is not None and self.seed < 0:
            raise ConfigurationError("Seed must be non-negative")
        if self.mode in INPUT_MODES and self.input_path is None:
            raise ConfigurationError(f"Mode {self.mode!r} needs an input file")

    def load(self, defaults_path: Union[str, Path] = "config/config.json") -> ConfigManager:
        """Validate and return the merged parameter set for this run."""
        self.validate()
        manager = ConfigManager(defaults_path, self.config_path)
        manager.apply_overrides(self.overrides)
        return manager
