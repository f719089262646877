"""Synthetic volumes with known structure.

Each cell follows a daily profile (a broad midday swell plus Gaussian morning
and evening peaks), scaled by a day-of-week factor. The morning peak height is
drawn per day and the evening peak is tied to it through ``rho``. Rain
episodes lower volume and are visible in the ``precip_probability`` column.
Missing entries and outliers are injected last and recorded in the oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from datetime import datetime

import numpy as np

from .data import (EXTERNAL_NAMES, WEATHER_FIELDS, Dataset, ExternalTable, MaskGrid, VolumeGrid,
                   calendar_features, fit_scaler, minmax_columns)
from .numeric import ConfigurationError
from .storage import read_container, write_container

MORNING_HOUR = 8.0
EVENING_HOUR = 19.0
MIDDAY_HOUR = (MORNING_HOUR + EVENING_HOUR) / 2.0


@dataclass
class SynthConfig:
    rows: int = 4
    cols: int = 4
    days: int = 60
    intervals_per_day: int = 48
    t0: datetime = datetime(2015, 1, 5)  # a Monday
    base_amplitude: float = 40.0
    daily_weight: float = 0.5
    weekly_weight: float = 0.15
    weekend_peak_scale: float = 0.35
    peak_amplitude: float = 1.5
    peak_width_minutes: float = 60.0
    peak_variation: float = 0.5
    rho: float = 0.8
    peak_noise: float = 0.05
    dip_probability: float = 0.2
    dip_magnitude: float = 0.4
    noise: float = 0.04
    missing_rate: float = 0.01
    outlier_rate: float = 0.002
    round_counts: bool = True
    seed: int = 0

    def validate(self) -> "SynthConfig":
        for name in ("dip_probability", "missing_rate", "outlier_rate", "dip_magnitude"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.rows < 1 or self.cols < 1 or self.days < 1 or self.intervals_per_day < 1:
            raise ConfigurationError("grid dimensions, days and intervals_per_day must be >= 1")
        if 24 * 60 % self.intervals_per_day:
            raise ConfigurationError("intervals_per_day must divide a day into whole minutes")
        if self.noise < 0 or self.peak_noise < 0 or self.peak_variation < 0:
            raise ConfigurationError("noise levels must be non-negative")
        return self

    @property
    def interval_minutes(self) -> int:
        return 24 * 60 // self.intervals_per_day

    @property
    def n_intervals(self) -> int:
        return self.days * self.intervals_per_day

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Oracle:
    """Ground truth behind a generated grid."""

    signal: np.ndarray  # [T, R, C, 2] clean values (after rounding, before corruption)
    missing: np.ndarray  # [T, R, C]
    outlier: np.ndarray  # [T, R, C]
    morning_peak: np.ndarray  # [days]
    evening_peak: np.ndarray  # [days]
    rain: np.ndarray  # [T]

    @property
    def corrupted(self) -> np.ndarray:
        return self.missing | self.outlier

    def save(self, path) -> None:
        write_container(path, "oracle", {
            "signal": self.signal, "missing": self.missing, "outlier": self.outlier,
            "morning_peak": self.morning_peak, "evening_peak": self.evening_peak, "rain": self.rain,
        })

    @classmethod
    def load(cls, path) -> "Oracle":
        arrays, _ = read_container(path, "oracle")
        return cls(**arrays)


def _bump(hours: np.ndarray, centre: float, width_hours: float) -> np.ndarray:
    return np.exp(-0.5 * ((hours - centre) / width_hours) ** 2)


def day_profile(cfg: SynthConfig, morning: float, evening: float) -> np.ndarray:
    """Relative volume over one day's intervals (interval midpoints)."""
    hours = (np.arange(cfg.intervals_per_day) + 0.5) * cfg.interval_minutes / 60.0
    swell = 1.0 + cfg.daily_weight * np.cos(2 * math.pi * (hours - MIDDAY_HOUR) / 24.0)
    width = cfg.peak_width_minutes / 60.0
    return swell + morning * _bump(hours, MORNING_HOUR, width) + evening * _bump(hours, EVENING_HOUR, width)


def weekly_factor(cfg: SynthConfig, weekday: int) -> float:
    return 1.0 + cfg.weekly_weight * math.cos(2 * math.pi * weekday / 7.0)


def generate(cfg: SynthConfig) -> tuple[VolumeGrid, MaskGrid, ExternalTable, Oracle]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    ipd, n = cfg.intervals_per_day, cfg.n_intervals
    weekdays = [(cfg.t0.weekday() + d) % 7 for d in range(cfg.days)]

    # per-day peak heights: evening follows morning through rho
    morning = cfg.peak_amplitude * (1.0 + cfg.peak_variation * rng.uniform(-1.0, 1.0, cfg.days))
    evening = cfg.rho * morning + cfg.peak_noise * cfg.peak_amplitude * rng.standard_normal(cfg.days)
    morning = np.maximum(morning, 0.0)
    evening = np.maximum(evening, 0.0)
    scale = np.array([cfg.weekend_peak_scale if wd >= 5 else 1.0 for wd in weekdays])
    morning, evening = morning * scale, evening * scale

    level = np.concatenate([weekly_factor(cfg, wd) * day_profile(cfg, m, e)
                            for wd, m, e in zip(weekdays, morning, evening)])

    # rain: at most one episode per day, 1 to 4 hours long
    rain = np.zeros(n, dtype=bool)
    for d in range(cfg.days):
        if rng.random() < cfg.dip_probability:
            length = int(rng.integers(2, 9)) * ipd // 48 or 1
            start = d * ipd + int(rng.integers(0, ipd))
            rain[start:start + length] = True
    level = level * np.where(rain, 1.0 - cfg.dip_magnitude, 1.0)

    cell = rng.uniform(0.6, 1.4, (cfg.rows, cfg.cols, 2))
    clean = cfg.base_amplitude * level[:, None, None, None] * cell[None]
    clean = clean * (1.0 + cfg.noise * rng.standard_normal(clean.shape))
    clean = np.maximum(clean, 0.0)
    if cfg.round_counts:
        clean = np.round(clean)

    values = clean.copy()
    missing = rng.random((n, cfg.rows, cfg.cols)) < cfg.missing_rate
    outlier = (rng.random((n, cfg.rows, cfg.cols)) < cfg.outlier_rate) & ~missing
    top = clean.reshape(-1, 2).max(axis=0)
    spikes = rng.uniform(2.5, 4.0, values.shape) * top
    if cfg.round_counts:
        spikes = np.ceil(spikes)
    values[outlier] = spikes[outlier]
    values[missing] = np.nan

    weather = np.empty((n, len(WEATHER_FIELDS)))
    weather[:] = rng.uniform(0.0, 1.0, (1, len(WEATHER_FIELDS)))
    weather += 0.05 * rng.standard_normal(weather.shape)
    precip = WEATHER_FIELDS.index("precip_probability")
    weather[:, precip] = np.where(rain, rng.uniform(0.8, 1.0, n), rng.uniform(0.0, 0.2, n))
    features = np.concatenate([
        minmax_columns(weather, n, [(0.0, 1.0)] * len(WEATHER_FIELDS)),
        calendar_features(cfg.t0, n, cfg.interval_minutes, set()),
    ], axis=1)

    grid = VolumeGrid(values, cfg.t0, cfg.interval_minutes)
    mask = MaskGrid(~(missing | outlier))
    oracle = Oracle(clean, missing, outlier, morning, evening, rain)
    return grid, mask, ExternalTable(features, EXTERNAL_NAMES), oracle


def to_dataset(grid: VolumeGrid, mask: MaskGrid, external: ExternalTable, test_days: int,
               upper: float = 0.5) -> Dataset:
    """Wrap a generated grid, fitting the scaler on everything before the last ``test_days`` days.

    When the training span holds no outlier, clean values fill the whole [0, 1]
    range and the ``upper`` bound is lifted to 1 so clean values stay valid.
    """
    ipd = 24 * 60 // grid.interval_minutes
    test_start = grid.n_intervals - test_days * ipd
    if test_start <= 0:
        raise ConfigurationError(f"test_days={test_days} leaves no training data")
    scaler = fit_scaler(grid.values, test_start)
    train = scaler.normalize(grid.values[:test_start])
    if np.nanmax(train[mask.valid[:test_start]]) > upper:
        upper = 1.0
    return Dataset(grid, mask, external, test_start, upper, scaler)
