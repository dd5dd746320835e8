"""Run configuration: TOML file, command-line overrides, validation."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .errors import ConfigError, ContractError
from .structural import OptimizerSettings, StructuralSpec
from .subspace import HankelSpec

INPUT_FORMATS = ("grid-csv", "panel-csv", "jsonl")


@dataclass(frozen=True)
class RegionConfig:
    south: float = 20.0
    north: float = 65.0
    west: float = 110.0
    east: float = 250.0
    box_size: float = 5.0
    min_coverage: float = 0.5
    max_missing_fraction: float = 0.5
    weighting: str = "none"

    @property
    def bounds(self):
        return (self.south, self.north, self.west, self.east)


@dataclass(frozen=True)
class RankConfig:
    """Exactly one of ``fixed`` or ``energy`` is used; ``energy`` wins when set."""

    fixed: int = 4
    energy: float | None = None


@dataclass(frozen=True)
class ChangePointConfig:
    min_persist: int = 24
    slope_window: int = 12
    inflection_factor: float = 3.0


@dataclass(frozen=True)
class ReportConfig:
    """Stratification pairs and reconstruction targets.

    An empty ``locations`` list means every box.
    """

    shallow: float = 10.0
    deep: float = 150.0
    trends: tuple[int, ...] = (1, 2, 3, 4)
    locations: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    input: str = ""
    format: str = "grid-csv"
    output: str = "out"
    depths: tuple[float, ...] = (10.0, 50.0, 100.0, 150.0, 200.0)
    workers: int = 1
    seed: int = 0
    region: RegionConfig = field(default_factory=RegionConfig)
    structural: StructuralSpec = field(default_factory=StructuralSpec)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    hankel: HankelSpec = field(default_factory=HankelSpec)
    rank: RankConfig = field(default_factory=RankConfig)
    change_points: ChangePointConfig = field(default_factory=ChangePointConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def validate(self) -> RunConfig:
        if not self.input:
            raise ConfigError("input path is required")
        if not Path(self.input).exists():
            raise ConfigError(f"input file {self.input!r} does not exist")
        if self.format not in INPUT_FORMATS:
            raise ConfigError(f"format must be one of {INPUT_FORMATS}, got {self.format!r}")
        if not self.depths:
            raise ConfigError("depth list is empty")
        if len(set(self.depths)) != len(self.depths):
            raise ConfigError("depths must be distinct")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        r = self.region
        if r.weighting not in ("none", "cos"):
            raise ConfigError("region.weighting must be 'none' or 'cos'")
        if not (0 <= r.min_coverage <= 1 and 0 <= r.max_missing_fraction <= 1):
            raise ConfigError("region coverage thresholds must lie in [0, 1]")
        if r.box_size <= 0 or r.north <= r.south:
            raise ConfigError("region must have north > south and a positive box size")
        if self.rank.energy is None and self.rank.fixed < 1:
            raise ConfigError("rank.fixed must be >= 1")
        if self.rank.energy is not None and not 0 < self.rank.energy <= 1:
            raise ConfigError("rank.energy must lie in (0, 1]")
        cp = self.change_points
        if cp.min_persist < 1 or cp.slope_window < 2 or cp.inflection_factor <= 1:
            raise ConfigError(
                "change_points needs min_persist >= 1, slope_window >= 2, inflection_factor > 1")
        if not self.report.trends or min(self.report.trends) < 1:
            raise ConfigError("report.trends must list trend numbers >= 1")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


_SECTIONS = {
    "region": RegionConfig,
    "structural": StructuralSpec,
    "optimizer": OptimizerSettings,
    "hankel": HankelSpec,
    "rank": RankConfig,
    "change_points": ChangePointConfig,
    "report": ReportConfig,
}


def _build(cls, values: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kw = {}
    for name, value in values.items():
        if isinstance(value, list):
            value = tuple(value)
        kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError, ContractError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def from_mapping(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay a nested mapping (as parsed from TOML) on ``base``."""
    base = base or RunConfig()
    top = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            merged = dict(dataclasses.asdict(getattr(base, key)))
            merged.update(value)
            top[key] = _build(_SECTIONS[key], merged, key)
        else:
            top[key] = value
    scalar = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = sorted(set(top) - scalar - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "depths" in top:
        top["depths"] = tuple(float(d) for d in top["depths"])
    return dataclasses.replace(base, **top)


def load(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_mapping(data)
