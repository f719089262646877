"""Metrics, period slicing, naive baselines and the horizon/period report."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from datetime import datetime
from typing import Sequence

import numpy as np

from .model import Forecaster, SampleSource, rollout

SLICES = ("all", "weekend", "weekday", "peak", "offpeak")
CHANNELS = ("start", "end")
DEFAULT_PEAKS = ((7 * 60, 10 * 60), (17 * 60, 20 * 60))
REPORT_COLUMNS = ("slice", "channel", "horizon_minutes", "rmse", "mape", "n")


class UndefinedMetric(ValueError):
    """No pairs survive the MAPE floor."""


class NoHistory(LookupError):
    """A baseline has nothing to average over."""


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} truths")
    if p.size == 0:
        raise ValueError("metrics need at least one pair")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mape(pred, truth, floor: float = 0.0) -> float:
    """Mean of |p - t| / t over pairs with ``t >= floor`` (and ``t > 0``), as a fraction."""
    p, t = _pair(pred, truth)
    keep = (t >= floor) & (t > 0)
    if not keep.any():
        raise UndefinedMetric(f"no truth value reaches the floor {floor}")
    return float(np.mean(np.abs(p[keep] - t[keep]) / t[keep]))


def parse_peak_windows(text: str) -> tuple[tuple[int, int], ...]:
    """``"07:00-10:00,17:00-20:00"`` -> minute ranges."""
    out = []
    for part in text.split(","):
        lo, hi = part.strip().split("-")
        out.append((_minutes(lo), _minutes(hi)))
    return tuple(out)


def _minutes(hhmm: str) -> int:
    h, m = hhmm.strip().split(":")
    return int(h) * 60 + int(m)


def slice_periods(times: Sequence[datetime], peak_windows=DEFAULT_PEAKS) -> dict[str, np.ndarray]:
    """Boolean membership per slice; peak windows are half-open ``[start, end)`` clock ranges."""
    weekend = np.array([ts.weekday() >= 5 for ts in times], dtype=bool)
    minute = np.array([ts.hour * 60 + ts.minute for ts in times])
    peak = np.zeros(len(times), dtype=bool)
    for lo, hi in peak_windows:
        peak |= (minute >= lo) & (minute < hi)
    return {
        "all": np.ones(len(times), dtype=bool),
        "weekend": weekend,
        "weekday": ~weekend,
        "peak": peak,
        "offpeak": ~peak,
    }


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def baseline_historical_average(values: np.ndarray, valid: np.ndarray, t: int,
                                region: tuple[int, int], intervals_per_day: int = 48
                                ) -> tuple[float, float]:
    """Forecast for ``t + 1``: mean of its time-of-day slot over all earlier days."""
    r, c = region
    target = t + 1
    picks = [values[s, r, c] for s in range(target - intervals_per_day, -1, -intervals_per_day)
             if valid[s, r, c]]
    if not picks:
        raise NoHistory(f"no earlier day for t={t} at {region}")
    m = np.mean(picks, axis=0)
    return float(m[0]), float(m[1])


def baseline_persistence(values: np.ndarray, valid: np.ndarray, t: int,
                         region: tuple[int, int]) -> tuple[float, float]:
    """The value at ``t``, or the most recent valid value before it."""
    r, c = region
    for s in range(t, -1, -1):
        if valid[s, r, c]:
            return float(values[s, r, c, 0]), float(values[s, r, c, 1])
    raise NoHistory(f"no valid value at or before t={t} at {region}")


def historical_average_table(values: np.ndarray, valid: np.ndarray, intervals_per_day: int = 48
                             ) -> np.ndarray:
    """``table[s]`` = mean over valid ``values[s - k*ipd]`` for k >= 1 (NaN if none)."""
    n = values.shape[0]
    ipd = intervals_per_day
    days = -(-n // ipd)
    pad = days * ipd - n
    v = np.where(valid[..., None], values, 0.0)
    v = np.concatenate([v, np.zeros((pad,) + v.shape[1:])]).reshape((days, ipd) + v.shape[1:])
    cnt = np.concatenate([valid.astype(np.float64), np.zeros((pad,) + valid.shape[1:])])
    cnt = cnt.reshape((days, ipd) + valid.shape[1:])
    csum = np.cumsum(v, axis=0) - v
    ccnt = np.cumsum(cnt, axis=0) - cnt
    with np.errstate(invalid="ignore", divide="ignore"):
        table = csum / ccnt[..., None]
    return table.reshape((days * ipd,) + values.shape[1:])[:n]


def persistence_table(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Last valid value at or before each interval, per cell (NaN before the first)."""
    n = values.shape[0]
    idx = np.where(valid, np.arange(n)[:, None, None], -1)
    idx = np.maximum.accumulate(idx, axis=0)
    r, c = np.meshgrid(np.arange(values.shape[1]), np.arange(values.shape[2]), indexing="ij")
    out = values[np.maximum(idx, 0), r[None], c[None]]
    out[idx < 0] = np.nan
    return out


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    slice: str
    channel: str
    horizon_minutes: int
    rmse: float
    mape: float
    n: int


class EvalReport:
    def __init__(self, rows: list[ReportRow]):
        self.rows = rows

    def get(self, slice_: str, channel: str, horizon_minutes: int) -> ReportRow:
        for row in self.rows:
            if (row.slice, row.channel, row.horizon_minutes) == (slice_, channel, horizon_minutes):
                return row
        raise KeyError((slice_, channel, horizon_minutes))

    @property
    def horizons(self) -> list[int]:
        return sorted({r.horizon_minutes for r in self.rows})

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.slice, r.channel, r.horizon_minutes, repr(r.rmse), repr(r.mape), r.n])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = [ReportRow(d["slice"], d["channel"], int(d["horizon_minutes"]),
                              float(d["rmse"]), float(d["mape"]), int(d["n"]))
                    for d in csv.DictReader(fh)]
        return cls(rows)


def build_report(pred: np.ndarray, truth: np.ndarray, ok: np.ndarray,
                 target_times: Sequence[Sequence[datetime]], interval_minutes: int = 30,
                 mape_floor: float = 10.0, peak_windows=DEFAULT_PEAKS) -> EvalReport:
    """Report from raw-unit forecasts.

    Args:
        pred, truth: [N, H, 2] arrays in raw units.
        ok: [N, H] mask of pairs to score.
        target_times: [N][H] timestamps of each forecast target.
    """
    n, horizons, _ = pred.shape
    rows = []
    for h in range(horizons):
        sel = ok[:, h]
        times = [target_times[i][h] for i in np.flatnonzero(sel)]
        slices = slice_periods(times, peak_windows)
        for name in SLICES:
            member = slices[name]
            for ch, channel in enumerate(CHANNELS):
                p = pred[sel, h, ch][member]
                t = truth[sel, h, ch][member]
                if p.size == 0:
                    rows.append(ReportRow(name, channel, (h + 1) * interval_minutes, math.nan, math.nan, 0))
                    continue
                try:
                    m = mape(p, t, mape_floor)
                except UndefinedMetric:
                    m = math.nan
                rows.append(ReportRow(name, channel, (h + 1) * interval_minutes, rmse(p, t), m, int(p.size)))
    return EvalReport(rows)


@dataclass
class EvalTargets:
    """Truth, scoring mask and timestamps for a set of forecast origins."""

    truth: np.ndarray
    ok: np.ndarray
    times: list[list[datetime]]


def eval_targets(values: np.ndarray, valid: np.ndarray, origins: np.ndarray, horizons: int,
                 time_of) -> EvalTargets:
    n_int = values.shape[0]
    t, r, c = origins[:, 0], origins[:, 1], origins[:, 2]
    steps = t[:, None] + np.arange(1, horizons + 1)[None, :]
    inside = steps < n_int
    clipped = np.minimum(steps, n_int - 1)
    ok = inside & valid[clipped, r[:, None], c[:, None]]
    truth = values[clipped, r[:, None], c[:, None]]
    times = [[time_of(s) for s in row] for row in steps]
    return EvalTargets(truth, ok, times)


def evaluate(model: Forecaster, source: SampleSource, origins: np.ndarray, raw_values: np.ndarray,
             denormalize, time_of, horizons: int = 4, mape_floor: float = 10.0,
             peak_windows=DEFAULT_PEAKS, bank=None) -> EvalReport:
    """Roll the model out ``horizons`` steps from every origin and score it in raw units."""
    if len(origins) == 0:
        raise ValueError("evaluate: empty test set")
    preds = rollout(model, source, origins[:, 0], origins[:, 1], origins[:, 2], horizons, bank)
    targets = eval_targets(raw_values, source.valid, origins, horizons, time_of)
    ok = targets.ok & np.isfinite(preds).all(axis=-1)
    return build_report(denormalize(preds), targets.truth, ok, targets.times,
                        source.cfg.interval_minutes, mape_floor, peak_windows)


def evaluate_baselines(raw_values: np.ndarray, valid: np.ndarray, origins: np.ndarray, time_of,
                       intervals_per_day: int = 48, interval_minutes: int = 30, horizons: int = 4,
                       mape_floor: float = 10.0, peak_windows=DEFAULT_PEAKS
                       ) -> dict[str, EvalReport]:
    """Historical-average and persistence reports over the same origins."""
    targets = eval_targets(raw_values, valid, origins, horizons, time_of)
    t, r, c = origins[:, 0], origins[:, 1], origins[:, 2]
    n_int = raw_values.shape[0]
    steps = np.minimum(t[:, None] + np.arange(1, horizons + 1)[None, :], n_int - 1)
    ha = historical_average_table(raw_values, valid, intervals_per_day)[steps, r[:, None], c[:, None]]
    last = persistence_table(raw_values, valid)[t, r, c]
    pers = np.repeat(last[:, None, :], horizons, axis=1)
    out = {}
    for name, pred in (("historical_average", ha), ("persistence", pers)):
        ok = targets.ok & np.isfinite(pred).all(axis=-1)
        out[name] = build_report(pred, targets.truth, ok, targets.times, interval_minutes,
                                 mape_floor, peak_windows)
    return out
