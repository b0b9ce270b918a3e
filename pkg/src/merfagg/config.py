"""Run configuration: a flat TOML file whose keys mirror the config fields."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bootstrap import BootstrapConfig
from .calibration import ElConfig
from .forest import ForestConfig
from .merf import MerfConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {"forest": ForestConfig, "merf": MerfConfig, "el": ElConfig,
             "bootstrap": BootstrapConfig}
_RUN_KEYS = {"survey", "aggregates", "out", "seed", "scenario", "replications", "jobs",
             "estimators"}


def _owner(key):
    for section, cls in _SECTIONS.items():
        names = {f.name for f in fields(cls)} - {"forest", "seed", "n_jobs"}
        if key in names:
            return section
    return None


@dataclass(frozen=True)
class RunConfig:
    forest: ForestConfig = field(default_factory=ForestConfig)
    merf: MerfConfig = field(default_factory=MerfConfig)
    el: ElConfig = field(default_factory=ElConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    B: int = 0
    survey: str | None = None
    aggregates: str | None = None
    out: str = "."
    seed: int = 0
    scenario: str = "normal"
    replications: int = 50
    jobs: int = 1
    estimators: tuple = ("Direct", "BHF", "MerfAgg")

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from flat key-value pairs; unknown keys are rejected."""
        parts = {s: {} for s in _SECTIONS}
        run = {}
        for key, value in values.items():
            if isinstance(value, dict):
                raise ConfigError(f"config must be flat; section [{key}] not allowed")
            if key in _RUN_KEYS:
                run[key] = value
            elif key == "B":
                run["B"] = value
            elif _owner(key):
                parts[_owner(key)][key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if "estimators" in run:
            run["estimators"] = tuple(run["estimators"])
        try:
            cfg = cls(**run)
            return cfg.merged(parts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def merged(self, parts: dict) -> "RunConfig":
        forest = replace(self.forest, **parts.get("forest", {}))
        merf = replace(self.merf, forest=forest, **parts.get("merf", {}))
        el = replace(self.el, **parts.get("el", {}))
        boot = replace(self.bootstrap, **parts.get("bootstrap", {}))
        return replace(self, forest=forest, merf=merf, el=el, bootstrap=boot)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply command-line overrides (``None`` values are ignored)."""
        given = {k: v for k, v in overrides.items() if v is not None}
        try:
            return replace(self, **given)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def seeded(self) -> "RunConfig":
        """Propagate the global seed into every component config."""
        forest = replace(self.forest, seed=self.seed)
        return replace(self, forest=forest, merf=replace(self.merf, forest=forest),
                       el=replace(self.el, seed=self.seed),
                       bootstrap=replace(self.bootstrap, seed=self.seed,
                                         B=max(self.B, 1), n_jobs=self.jobs))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig.from_mapping(values)
