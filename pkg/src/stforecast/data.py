"""Trip ingestion, rasterization, scaling, masking and external features."""
from __future__ import annotations

import csv
import logging
import math
import os
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Iterable, Iterator, Sequence

import numpy as np

from .storage import read_container, write_container

logger = logging.getLogger(__name__)

TRIP_COLUMNS = (
    "pickup_datetime",
    "dropoff_datetime",
    "pickup_latitude",
    "pickup_longitude",
    "dropoff_latitude",
    "dropoff_longitude",
)
WEATHER_FIELDS = (
    "temperature",
    "wind_speed",
    "humidity",
    "uv_index",
    "precip_probability",
    "pressure",
    "visibility",
)
DAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")
EXTERNAL_NAMES = WEATHER_FIELDS + tuple(f"dow_{d}" for d in DAY_NAMES) + ("holiday",)
EXTERNAL_SIZE = len(EXTERNAL_NAMES)


class TripFormatError(ValueError):
    """Too many rows of a trip file could not be parsed."""


class CoverageError(ValueError):
    """Some intervals have no weather observation."""


class ScalerStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class BBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ValueError(f"degenerate bounding box {self}")


@dataclass(frozen=True)
class TripRecord:
    pickup_time: datetime
    dropoff_time: datetime
    pickup_lat: float
    pickup_lon: float
    dropoff_lat: float
    dropoff_lon: float


@dataclass
class VolumeGrid:
    """Raw start/end counts, ``values[t, row, col, channel]``; NaN marks a missing entry."""

    values: np.ndarray
    t0: datetime
    interval_minutes: int = 30
    bbox: BBox | None = None
    dropped: tuple[int, int] = (0, 0)

    @property
    def n_intervals(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def time_of(self, t) -> datetime:
        return self.t0 + timedelta(minutes=self.interval_minutes * int(t))


@dataclass
class MaskGrid:
    valid: np.ndarray  # bool [T, rows, cols]


@dataclass
class ExternalTable:
    features: np.ndarray  # [T, 15]
    names: tuple[str, ...] = EXTERNAL_NAMES


# ---------------------------------------------------------------------------
# trips
# ---------------------------------------------------------------------------

class TripReader:
    """Iterate ``TripRecord``s from a CSV, counting and skipping malformed rows.

    The malformed-row check runs when iteration finishes: more than half the
    rows unreadable raises ``TripFormatError``.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = path
        self.rows = 0
        self.malformed = 0
        if not os.path.exists(path):
            raise FileNotFoundError(path)

    def __iter__(self) -> Iterator[TripRecord]:
        with open(self.path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in TRIP_COLUMNS if c not in (reader.fieldnames or ())]
            if missing:
                raise TripFormatError(f"{self.path}: missing columns {missing}")
            for row in reader:
                self.rows += 1
                rec = _parse_trip_row(row)
                if rec is None:
                    self.malformed += 1
                    continue
                yield rec
        if self.rows and self.malformed * 2 > self.rows:
            raise TripFormatError(
                f"{self.path}: {self.malformed} of {self.rows} rows malformed"
            )
        if self.malformed:
            logger.warning("%s: skipped %d malformed rows", self.path, self.malformed)


def _parse_trip_row(row: dict) -> TripRecord | None:
    try:
        pick = datetime.fromisoformat(row["pickup_datetime"].strip())
        drop = datetime.fromisoformat(row["dropoff_datetime"].strip())
        coords = [float(row[c]) for c in TRIP_COLUMNS[2:]]
    except (ValueError, TypeError, AttributeError):
        return None
    if drop < pick or not all(math.isfinite(v) for v in coords):
        return None
    return TripRecord(pick, drop, *coords)


def parse_trips(path: str | os.PathLike) -> TripReader:
    return TripReader(path)


_EPOCH = datetime(1970, 1, 1)


def _seconds(ts: datetime) -> float:
    # naive timestamps are read as wall-clock values, never shifted by the host zone
    if ts.tzinfo is None:
        return (ts - _EPOCH).total_seconds()
    return ts.timestamp()


def _cell_index(coord: np.ndarray, lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    inside = (coord >= lo) & (coord <= hi)
    idx = np.floor((coord - lo) / (hi - lo) * n).astype(np.int64)
    return np.clip(idx, 0, n - 1), inside


def rasterize(trips: Iterable[TripRecord], bbox: BBox, t0: datetime, n_intervals: int,
              rows: int = 10, cols: int = 20, interval_minutes: int = 30,
              chunk: int = 100_000) -> VolumeGrid:
    """Count pickups (channel 0) and dropoffs (channel 1) per interval and cell.

    Events outside the box or the time range are dropped and counted in
    ``VolumeGrid.dropped``. A coordinate on the max edge falls in the last cell.
    """
    if n_intervals <= 0:
        raise ValueError("n_intervals must be positive")
    counts = np.zeros((n_intervals, rows, cols, 2), dtype=np.int64)
    dropped = [0, 0]
    step = interval_minutes * 60.0
    base = _seconds(t0)

    def flush(buf):
        if not buf:
            return
        arr = np.array(buf, dtype=np.float64)
        for ch, (tcol, lat, lon) in enumerate(((0, 2, 3), (1, 4, 5))):
            tidx = np.floor((arr[:, tcol] - base) / step)
            in_time = (tidx >= 0) & (tidx < n_intervals)
            r, in_lat = _cell_index(arr[:, lat], bbox.lat_min, bbox.lat_max, rows)
            c, in_lon = _cell_index(arr[:, lon], bbox.lon_min, bbox.lon_max, cols)
            keep = in_time & in_lat & in_lon
            dropped[ch] += int((~keep).sum())
            np.add.at(counts, (tidx[keep].astype(np.int64), r[keep], c[keep], ch), 1)

    buf = []
    for rec in trips:
        buf.append((_seconds(rec.pickup_time), _seconds(rec.dropoff_time),
                    rec.pickup_lat, rec.pickup_lon, rec.dropoff_lat, rec.dropoff_lon))
        if len(buf) >= chunk:
            flush(buf)
            buf = []
    flush(buf)
    return VolumeGrid(counts.astype(np.float64), t0, interval_minutes, bbox, tuple(dropped))


# ---------------------------------------------------------------------------
# scaling and masking
# ---------------------------------------------------------------------------

class Scaler:
    """Per-channel min-max scaling fit on the training range."""

    def __init__(self, minimum=None, maximum=None):
        self.min = None if minimum is None else np.asarray(minimum, dtype=np.float64)
        self.max = None if maximum is None else np.asarray(maximum, dtype=np.float64)

    @property
    def fitted(self) -> bool:
        return self.min is not None

    def fit(self, values: np.ndarray) -> "Scaler":
        """Fit on ``values[..., channel]``, ignoring NaNs."""
        flat = values.reshape(-1, values.shape[-1])
        self.min = np.nanmin(flat, axis=0)
        self.max = np.nanmax(flat, axis=0)
        return self

    def _span(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.fitted:
            raise ScalerStateError("scaler used before fit")
        span = self.max - self.min
        degenerate = span == 0
        return np.where(degenerate, 1.0, span), degenerate

    def normalize(self, x) -> np.ndarray:
        span, degenerate = self._span()
        out = (np.asarray(x, dtype=np.float64) - self.min) / span
        return np.where(degenerate, 0.0, out)

    def denormalize(self, x) -> np.ndarray:
        span, degenerate = self._span()
        out = np.asarray(x, dtype=np.float64) * span + self.min
        return np.where(degenerate, self.min, out)


def fit_scaler(values: np.ndarray, train_end: int) -> Scaler:
    return Scaler().fit(values[:train_end])


def build_mask(normalized: np.ndarray, upper: float = 0.5) -> MaskGrid:
    """Valid iff every channel is present and lies in ``[0, upper]``."""
    ok = np.isfinite(normalized) & (normalized >= 0.0) & (normalized <= upper)
    return MaskGrid(ok.all(axis=-1))


# ---------------------------------------------------------------------------
# external features
# ---------------------------------------------------------------------------

_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def strip_unit(raw) -> float:
    """Numeric part of a reading such as ``"27 F"`` or ``"1013mb"``."""
    if isinstance(raw, (int, float)):
        return float(raw)
    m = _NUMBER.search(str(raw))
    if m is None:
        raise ValueError(f"no number in {raw!r}")
    return float(m.group())


def read_holidays(path: str | os.PathLike | None) -> set[date]:
    if path is None:
        return set()
    out = set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.add(date.fromisoformat(row["date"].strip()))
    return out


def calendar_features(t0: datetime, n_intervals: int, interval_minutes: int,
                      holidays: set[date]) -> np.ndarray:
    """One-hot day of week (Monday first) and a holiday flag, [T, 8]."""
    out = np.zeros((n_intervals, 8))
    for t in range(n_intervals):
        ts = t0 + timedelta(minutes=interval_minutes * t)
        out[t, ts.weekday()] = 1.0
        out[t, 7] = float(ts.date() in holidays)
    return out


def minmax_columns(raw: np.ndarray, train_end: int,
                   ranges: Sequence[tuple[float, float]] | None = None) -> np.ndarray:
    """Scale columns to [0, 1] using training-range extremes (or given ranges), clipped."""
    if ranges is None:
        lo = raw[:train_end].min(axis=0)
        hi = raw[:train_end].max(axis=0)
    else:
        lo = np.array([r[0] for r in ranges], dtype=np.float64)
        hi = np.array([r[1] for r in ranges], dtype=np.float64)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip((raw - lo) / span, 0.0, 1.0)


def build_external(weather_csv: str | os.PathLike, holidays_csv: str | os.PathLike | None,
                   t0: datetime, n_intervals: int, interval_minutes: int = 30,
                   train_end: int | None = None,
                   ranges: Sequence[tuple[float, float]] | None = None,
                   max_fill_minutes: int = 180) -> ExternalTable:
    """Weather (forward-filled, min-max scaled) plus calendar encodings.

    The weather CSV needs a ``time`` column (ISO-8601) and one column per
    name in ``WEATHER_FIELDS``; values may carry unit suffixes.
    """
    train_end = n_intervals if train_end is None else train_end
    times, rows = [], []
    with open(weather_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("time",) + WEATHER_FIELDS if c not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"{weather_csv}: missing columns {missing}")
        for row in reader:
            times.append(datetime.fromisoformat(row["time"].strip()))
            rows.append([strip_unit(row[f]) for f in WEATHER_FIELDS])
    order = np.argsort(np.array([_seconds(t) for t in times]), kind="stable")
    stamps = np.array([_seconds(times[i]) for i in order])
    values = np.array([rows[i] for i in order], dtype=np.float64).reshape(-1, len(WEATHER_FIELDS))

    starts = np.array([_seconds(t0 + timedelta(minutes=interval_minutes * t))
                       for t in range(n_intervals)])
    pos = np.searchsorted(stamps, starts, side="right") - 1
    gaps = np.flatnonzero((pos < 0) | (starts - stamps[np.maximum(pos, 0)] > max_fill_minutes * 60))
    if gaps.size:
        shown = ", ".join(str(g) for g in gaps[:10])
        raise CoverageError(f"no weather for {gaps.size} intervals (first: {shown})")
    weather = minmax_columns(values[pos], train_end, ranges)
    cal = calendar_features(t0, n_intervals, interval_minutes, read_holidays(holidays_csv))
    return ExternalTable(np.concatenate([weather, cal], axis=1))


# ---------------------------------------------------------------------------
# prepared dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Raw grid, mask and external table plus the split that fixes the scaler."""

    grid: VolumeGrid
    mask: MaskGrid
    external: ExternalTable
    test_start: int
    upper: float = 0.5
    scaler: Scaler = field(default=None)

    def __post_init__(self):
        if self.scaler is None:
            self.scaler = fit_scaler(self.grid.values, self.test_start)

    @classmethod
    def from_grid(cls, grid: VolumeGrid, external: ExternalTable, test_start: int,
                  upper: float = 0.5) -> "Dataset":
        scaler = fit_scaler(grid.values, test_start)
        mask = build_mask(scaler.normalize(grid.values), upper)
        return cls(grid, mask, external, test_start, upper, scaler)

    @property
    def normalized(self) -> np.ndarray:
        return self.scaler.normalize(self.grid.values)

    def times(self) -> list[datetime]:
        return [self.grid.time_of(t) for t in range(self.grid.n_intervals)]

    def save(self, path: str | os.PathLike) -> None:
        g = self.grid
        meta = {
            "t0": g.t0.isoformat(),
            "interval_minutes": g.interval_minutes,
            "bbox": None if g.bbox is None else [g.bbox.lat_min, g.bbox.lat_max,
                                                 g.bbox.lon_min, g.bbox.lon_max],
            "dropped": list(g.dropped),
            "test_start": self.test_start,
            "upper": self.upper,
            "external_names": list(self.external.names),
        }
        write_container(path, "dataset", {
            "volumes": g.values,
            "mask": self.mask.valid,
            "external": self.external.features,
            "scaler_min": self.scaler.min,
            "scaler_max": self.scaler.max,
        }, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Dataset":
        arrays, meta = read_container(path, "dataset")
        bbox = None if meta["bbox"] is None else BBox(*meta["bbox"])
        grid = VolumeGrid(arrays["volumes"], datetime.fromisoformat(meta["t0"]),
                          meta["interval_minutes"], bbox, tuple(meta["dropped"]))
        return cls(grid, MaskGrid(arrays["mask"]),
                   ExternalTable(arrays["external"], tuple(meta["external_names"])),
                   meta["test_start"], meta["upper"],
                   Scaler(arrays["scaler_min"], arrays["scaler_max"]))
