"""Run configuration: one JSON document covering every tunable.

Sections mirror the modules (``entropy``, ``signal``, ``costs``, ``folds``,
``validation``, ``synth``). Unknown keys are rejected by name so a typo
does not silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .backtest import CostModel
from .signal import SignalConfig
from .synth import SynthConfig
from .validate import ValidationConfig

CONFIG_ENV = "FLOWENTROPY_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EntropyConfig:
    window_s: int = 120
    min_transitions: int = 30

    def __post_init__(self):
        if self.window_s < 10:
            raise ValueError("window_s must be at least 10")
        if self.min_transitions < 1:
            raise ValueError("min_transitions must be at least 1")


@dataclass(frozen=True)
class FoldConfig:
    train_days: int = 10
    test_days: int = 5

    def __post_init__(self):
        if self.train_days < 1 or self.test_days < 1:
            raise ValueError("train_days and test_days must be positive")


_SECTIONS = {
    "entropy": EntropyConfig,
    "signal": SignalConfig,
    "costs": CostModel,
    "folds": FoldConfig,
    "validation": ValidationConfig,
    "synth": SynthConfig,
}


@dataclass(frozen=True)
class RunConfig:
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    signal: SignalConfig = field(default_factory=SignalConfig)
    costs: CostModel = field(default_factory=CostModel)
    folds: FoldConfig = field(default_factory=FoldConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = getattr(self, name)
            out[name] = sec.to_dict() if hasattr(sec, "to_dict") else dataclasses.asdict(sec)
        out["signal"]["take_profit_grid"] = list(self.signal.take_profit_grid)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(_SECTIONS) - {"provenance"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            kwargs[name] = _build(typ, name, raw)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with some fields of one section replaced (``None`` values are skipped)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        merged = dict(self.to_dict()[section])
        merged.update(values)
        return dataclasses.replace(self, **{section: _build(_SECTIONS[section], section, merged)})

    def provenance(self, **extra) -> dict:
        return {"tool": "flowentropy", "version": __version__, "config": self.to_dict(), **extra}


def _build(typ, section: str, raw: dict):
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown field(s) in {section}: {', '.join(sorted(unknown))}")
    raw = dict(raw)
    if typ is SignalConfig and "take_profit_grid" in raw:
        raw["take_profit_grid"] = tuple(float(x) for x in raw["take_profit_grid"])
    try:
        if typ is SynthConfig:
            return SynthConfig.from_dict(raw)
        return typ(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read ``path``, else the file named by $FLOWENTROPY_CONFIG, else defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return RunConfig.from_json(path.read_text(encoding="utf-8"))
