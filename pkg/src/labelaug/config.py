"""The shared JSON config file: one section per stage.

    {"pipeline": {...}, "train": {...}, "synth": {...}}

Every key mirrors a field of PipelineConfig, TrainConfig or SyntheticSpec.
Missing sections or keys take the defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Iterable

from .data_model import PipelineConfig, atomic_write
from .errors import ConfigError
from .synthetic import SyntheticSpec
from .uncertainty_head import TrainConfig

SECTIONS = {"pipeline": PipelineConfig, "train": TrainConfig, "synth": SyntheticSpec}


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = PipelineConfig()
    train: TrainConfig = TrainConfig()
    synth: SyntheticSpec = SyntheticSpec()

    def to_dict(self) -> dict[str, Any]:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        parts = {}
        for name, kind in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            parts[name] = kind.from_dict(section)
        return cls(**parts)

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            replace(self.pipeline, seed=seed),
            replace(self.train, seed=seed),
            replace(self.synth, seed=seed),
        )

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        data = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            section, name = _resolve_key(key.strip())
            data[section][name] = _parse_value(raw.strip())
        return RunConfig.from_dict(data)


def _section_dict(obj) -> dict[str, Any]:
    d = obj.to_dict() if hasattr(obj, "to_dict") else {f.name: getattr(obj, f.name) for f in fields(obj)}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _resolve_key(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown config key {key!r}")
        return section, name
    owners = [s for s, kind in SECTIONS.items() if key in {f.name for f in fields(kind)}]
    if not owners:
        raise ConfigError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"config key {key!r} is ambiguous; use one of " + ", ".join(f"{s}.{key}" for s in owners))
    return owners[0], key


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str | os.PathLike) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
