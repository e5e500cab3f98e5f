"""One JSON schema for every tunable constant.

A config document may override any subset of the defaults::

    {"staple": {...}, "metrics": {...}, "fit": {...},
     "encoding": {"1": "NETC", ...}, "composites": {"TC": ["ET", "NETC"], ...}}
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .lesion import MetricConfig
from .regions import DEFAULT_COMPOSITES
from .staple import StapleConfig
from .volume import DEFAULT_ENCODING
from .weighted import FitConfig


class ConfigError(ValueError):
    pass


def _build(cls, doc: Mapping[str, Any] | None, section: str):
    doc = dict(doc or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {unknown}; valid keys: {sorted(known)}")
    if "regions" in doc:
        doc["regions"] = tuple(doc["regions"])
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


@dataclass
class Settings:
    staple: StapleConfig = field(default_factory=StapleConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    encoding: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_ENCODING))
    composites: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_COMPOSITES))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> "Settings":
        doc = dict(doc or {})
        sections = {"staple", "metrics", "fit", "encoding", "composites"}
        unknown = sorted(set(doc) - sections)
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; valid: {sorted(sections)}")
        enc = doc.get("encoding")
        try:
            encoding = dict(DEFAULT_ENCODING) if enc is None else {int(k): str(v) for k, v in enc.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'encoding' section: {exc}") from exc
        comps = doc.get("composites")
        composites = dict(DEFAULT_COMPOSITES) if comps is None else {k: tuple(v) for k, v in comps.items()}
        names = set(encoding.values())
        for name, members in composites.items():
            bad = [m for m in members if m not in names]
            if bad:
                raise ConfigError(f"composite {name} refers to labels {bad} missing from the encoding")
        return cls(
            _build(StapleConfig, doc.get("staple"), "staple"),
            _build(MetricConfig, doc.get("metrics"), "metrics"),
            _build(FitConfig, doc.get("fit"), "fit"),
            encoding,
            composites,
        )

    def to_dict(self) -> dict:
        return {
            "staple": self.staple.to_dict(),
            "metrics": self.metrics.to_dict(),
            "fit": self.fit.to_dict(),
            "encoding": {str(k): v for k, v in sorted(self.encoding.items())},
            "composites": {k: list(v) for k, v in self.composites.items()},
        }


def load_settings(path: str | Path | None) -> Settings:
    if path is None:
        return Settings()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return Settings.from_dict(doc)


def dump_defaults() -> str:
    return json.dumps(Settings().to_dict(), indent=2, sort_keys=True)
