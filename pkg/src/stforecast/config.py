"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Lists are comma separated.
Model, training and synthetic-data settings live in the same file; synthetic
keys carry a ``synth_`` prefix. Every problem is reported with its line number.
"""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from datetime import datetime

from .data import BBox
from .evaluation import parse_peak_windows
from .model import ModelConfig
from .numeric import ConfigurationError
from .synthetic import SynthConfig
from .training import TrainConfig


class ConfigFileError(ConfigurationError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else f"{path or '<config>'}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class RunConfig:
    # inputs
    trips_csv: str = ""
    weather_csv: str = ""
    holidays_csv: str = ""
    bbox: str = "40.68,40.80,-74.02,-73.93"
    grid_rows: int = 10
    grid_cols: int = 20
    start: str = "2014-04-01T00:00"
    span_days: int = 60
    # split and evaluation
    test_days: int = 20
    val_fraction: float = 0.2
    validation: str = "holdout"  # or "test": the test span doubles as validation
    mask_upper: float = 0.5
    mape_floor: float = 10.0
    peak_windows: str = "07:00-10:00,17:00-20:00"
    horizons: int = 4
    # outputs
    output_dir: str = "run"
    dataset_path: str = ""
    # randomness
    seed: int = 0
    gradcheck_eps: float = 1e-3
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    # -- derived --------------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    @property
    def dataset_file(self) -> str:
        return self.dataset_path or self.path("dataset.stfc")

    @property
    def start_time(self) -> datetime:
        return datetime.fromisoformat(self.start)

    @property
    def bbox_value(self) -> BBox:
        return BBox(*(float(x) for x in self.bbox.split(",")))

    @property
    def peak_ranges(self) -> tuple[tuple[int, int], ...]:
        return parse_peak_windows(self.peak_windows)

    def check(self) -> None:
        """Raise ``ConfigurationError`` on an out-of-range setting."""
        if self.test_days < 1:
            raise ConfigurationError("test_days must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if self.validation not in ("holdout", "test"):
            raise ConfigurationError("validation must be 'holdout' or 'test'")
        if not 0.0 < self.mask_upper <= 1.0:
            raise ConfigurationError("mask_upper must lie in (0, 1]")
        if self.mape_floor < 0:
            raise ConfigurationError("mape_floor must be >= 0")
        if not 1 <= self.horizons <= 4:
            raise ConfigurationError("horizons must lie in 1..4")
        if not 0.0 < self.gradcheck_eps <= 1e-3:
            raise ConfigurationError("gradcheck_eps must lie in (0, 1e-3]")
        if self.grid_rows < 1 or self.grid_cols < 1 or self.span_days < 1:
            raise ConfigurationError("grid_rows, grid_cols and span_days must be >= 1")
        if len(self.bbox.split(",")) != 4:
            raise ConfigurationError("bbox needs lat_min,lat_max,lon_min,lon_max")
        self.bbox_value
        self.start_time
        self.peak_ranges
        self.model.validate()
        self.train.validate()
        self.synth.validate()


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig}
_PREFIX = {"synth": "synth_"}


def _targets() -> dict[str, tuple[str | None, dataclasses.Field]]:
    """Config key -> (section, field)."""
    out: dict[str, tuple[str | None, dataclasses.Field]] = {}
    for f in dataclasses.fields(RunConfig):
        if f.name not in _SECTIONS:
            out[f.name] = (None, f)
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if section == "train" and f.name == "seed":
                continue  # training follows the run seed
            key = _PREFIX.get(section, "") + f.name
            if key in out:
                raise RuntimeError(f"config key collision: {key}")
            out[key] = (section, f)
    return out


def _field_type(owner: type, f: dataclasses.Field):
    hints = typing.get_type_hints(owner)
    return hints[f.name]


def _convert(raw: str, kind) -> object:
    origin = typing.get_origin(kind)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        return _convert(raw, args[0])
    if origin is tuple:
        inner = typing.get_args(kind)[0]
        return tuple(_convert(p.strip(), inner) for p in raw.split(",") if p.strip())
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is datetime:
        return datetime.fromisoformat(raw)
    return raw


def parse_config(text: str, path: str | None = None) -> RunConfig:
    cfg = RunConfig()
    targets = _targets()
    seen: dict[str, int] = {}
    owners = {None: RunConfig, **_SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigFileError(f"expected 'key = value', got {stripped!r}", lineno, path)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in targets:
            raise ConfigFileError(f"unknown key {key!r}", lineno, path)
        if key in seen:
            raise ConfigFileError(f"{key!r} already set on line {seen[key]}", lineno, path)
        seen[key] = lineno
        section, f = targets[key]
        try:
            value = _convert(raw, _field_type(owners[section], f))
        except ValueError as exc:
            raise ConfigFileError(f"{key}: {exc}", lineno, path) from None
        setattr(cfg if section is None else getattr(cfg, section), f.name, value)
    cfg.model.__post_init__()
    if "synth_seed" not in seen:
        cfg.synth.seed = cfg.seed
    cfg.train.seed = cfg.seed
    try:
        cfg.check()
    except ConfigurationError as exc:
        line = _blame(str(exc), seen)
        raise ConfigFileError(str(exc), line, path) from None
    return cfg


def _blame(message: str, seen: dict[str, int]) -> int | None:
    """Line of the key a validation message starts with, if it was set in the file."""
    word = message.split()[0] if message else ""
    for key, line in seen.items():
        if word in (key, key.removeprefix("synth_")):
            return line
    return None


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), os.fspath(path))
