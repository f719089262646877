"""The full forecaster: shared local CNN, short-term BDLSTM, three periodic
attention branches with two-stage BDLSTMs, and the fused output layer."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numeric as nx
from .data import EXTERNAL_SIZE, Dataset
from .layers import AttentionScorer, BdLstm, FusionLayer, LocalCnn, Module, attention_pool, \
    attention_weights
from .numeric import ConfigurationError, DimensionError, Param, Tensor
from .storage import read_container, write_container

CHECKPOINT_FORMAT = 1
BRANCHES = ("hour", "day", "week")


class SampleSkipped(IndexError):
    """A window of the requested sample falls outside the grid's time range."""


class CheckpointMismatch(ValueError):
    """A checkpoint does not fit the configuration or data it is used with."""


@dataclass
class ModelConfig:
    patch_size: int = 7
    conv_layers: int = 3
    filters: int = 64
    kernel_size: int = 3
    hidden: int = 128
    tau_short: int = 3
    half_window: int = 3
    hour_anchors: tuple[int, ...] = (22,)
    days: int = 3
    weeks: int = 1
    interval_minutes: int = 30
    intervals_per_day: int = 48
    external_size: int = EXTERNAL_SIZE
    share_cnn: bool = True

    def __post_init__(self):
        self.hour_anchors = tuple(int(a) for a in self.hour_anchors)

    def validate(self) -> "ModelConfig":
        checks = [
            (self.patch_size >= 1 and self.patch_size % 2 == 1, "patch_size must be a positive odd number"),
            (self.kernel_size >= 1 and self.kernel_size % 2 == 1, "kernel_size must be a positive odd number"),
            (self.conv_layers >= 1, "conv_layers must be >= 1"),
            (self.filters >= 1, "filters must be >= 1"),
            (self.hidden >= 1, "hidden must be >= 1"),
            (self.tau_short >= 1, "tau_short must be >= 1"),
            (self.half_window >= 0, "half_window must be >= 0"),
            (all(a > 0 for a in self.hour_anchors), "hour_anchors must be positive shifts"),
            (self.days >= 0 and self.weeks >= 0, "days and weeks must be >= 0"),
            (self.interval_minutes > 0, "interval_minutes must be positive"),
            (self.intervals_per_day * self.interval_minutes == 1440,
             "intervals_per_day * interval_minutes must equal one day"),
            (self.external_size >= 0, "external_size must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)
        return self

    @property
    def window(self) -> int:
        return 2 * self.half_window + 1

    def anchor_lags(self) -> dict[str, list[int]]:
        """Lag of each anchor centre behind ``t`` per active branch, oldest first."""
        week = 7 * self.intervals_per_day
        lags = {
            "hour": sorted(self.hour_anchors, reverse=True),
            "day": [j * self.intervals_per_day for j in range(self.days, 0, -1)],
            "week": [j * week for j in range(self.weeks, 0, -1)],
        }
        return {name: v for name, v in lags.items() if v}

    @property
    def lookback(self) -> int:
        """Smallest usable origin ``t``."""
        lags = [max(v) + self.half_window for v in self.anchor_lags().values()]
        return max([self.tau_short - 1] + lags)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hour_anchors"] = list(self.hour_anchors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class Windows:
    """Patch windows for one branch: [B, anchors, 2q+1, ...]."""

    valid: np.ndarray
    times: np.ndarray
    patches: np.ndarray | None = None
    override: np.ndarray | None = None  # positions whose patch differs from the stored grid


@dataclass
class SampleBatch:
    """``B`` examples stacked on a leading axis (``B = 1`` for a single sample).

    ``target`` holds the normalized (start, end) volume at ``t + 1`` and is
    NaN when it lies past the end of the data.
    """

    short: Windows
    branches: dict[str, Windows]
    external: np.ndarray
    target: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    origins: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)


def _predicate(values: np.ndarray, upper: float) -> np.ndarray:
    ok = np.isfinite(values) & (values >= 0.0) & (values <= upper)
    return ok.all(axis=-1)


class SampleSource:
    """Gathers patches, validity flags and external vectors from one normalized grid."""

    def __init__(self, normalized: np.ndarray, valid: np.ndarray, external: np.ndarray,
                 cfg: ModelConfig, upper: float = 0.5):
        cfg.validate()
        if external.shape[0] != normalized.shape[0]:
            raise DimensionError(
                f"external table has {external.shape[0]} intervals, grid has {normalized.shape[0]}"
            )
        if external.shape[1] != cfg.external_size:
            raise CheckpointMismatch(
                f"external vectors have {external.shape[1]} features, model expects {cfg.external_size}"
            )
        self.cfg = cfg
        self.normalized = normalized
        self.values = np.nan_to_num(normalized, nan=0.0)
        self.valid = np.asarray(valid, dtype=bool)
        self.external = external
        self.upper = upper
        r = cfg.patch_size // 2
        padded = np.pad(self.values, ((0, 0), (r, r), (r, r), (0, 0)))
        view = np.lib.stride_tricks.sliding_window_view(
            padded, (cfg.patch_size, cfg.patch_size), axis=(1, 2))
        self._patch_view = view.transpose(0, 1, 2, 4, 5, 3)  # [T, R, C, S, S, 2]

    @classmethod
    def from_dataset(cls, ds: Dataset, cfg: ModelConfig) -> "SampleSource":
        return cls(ds.normalized, ds.mask.valid, ds.external.features, cfg, ds.upper)

    @property
    def n_intervals(self) -> int:
        return self.values.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def with_values(self, normalized: np.ndarray, valid: np.ndarray) -> "SampleSource":
        return SampleSource(normalized, valid, self.external, self.cfg, self.upper)

    def origins(self, start: int = 0, stop: int | None = None,
                require_valid_target: bool = True) -> np.ndarray:
        """All (t, row, col) whose windows fit and whose ``t + 1`` target exists in [start, stop)."""
        stop = self.n_intervals - 1 if stop is None else min(stop, self.n_intervals - 1)
        ts = np.arange(max(start, self.cfg.lookback), stop)
        rows, cols = self.grid_shape
        tt, rr, cc = np.meshgrid(ts, np.arange(rows), np.arange(cols), indexing="ij")
        out = np.stack([tt.ravel(), rr.ravel(), cc.ravel()], axis=1)
        if require_valid_target and len(out):
            out = out[self.valid[out[:, 0] + 1, out[:, 1], out[:, 2]]]
        return out

    def patches(self, times: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self._patch_view[times, rows, cols]

    def build_batch(self, times, rows, cols, with_patches: bool = True) -> SampleBatch:
        times = np.asarray(times, dtype=np.int64).reshape(-1)
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        cfg = self.cfg
        if len(times) and (times.min() < cfg.lookback or times.max() >= self.n_intervals):
            bad = times[(times < cfg.lookback) | (times >= self.n_intervals)][0]
            raise SampleSkipped(
                f"origin t={bad} needs windows back to t-{cfg.lookback} inside [0, {self.n_intervals})"
            )
        r2, c2 = rows[:, None], cols[:, None]
        short_t = times[:, None] + np.arange(-cfg.tau_short + 1, 1)[None, :]
        short = Windows(self.valid[short_t, r2, c2], short_t,
                        self.patches(short_t, r2, c2) if with_patches else None)
        offsets = np.arange(-cfg.half_window, cfg.half_window + 1)
        branches = {}
        r3, c3 = rows[:, None, None], cols[:, None, None]
        for name, lags in cfg.anchor_lags().items():
            wt = times[:, None, None] - np.asarray(lags)[None, :, None] + offsets[None, None, :]
            branches[name] = Windows(self.valid[wt, r3, c3], wt,
                                     self.patches(wt, r3, c3) if with_patches else None)
        target = np.full((len(times), 2), np.nan)
        inside = times + 1 < self.n_intervals
        target[inside] = self.normalized[times[inside] + 1, rows[inside], cols[inside]]
        return SampleBatch(short, branches, self.external[times], target, rows, cols, times)


def build_sample(source: SampleSource, region: tuple[int, int], t: int) -> SampleBatch:
    """One sample (a batch of size 1) for ``region`` at origin ``t``."""
    rows, cols = source.grid_shape
    if not (0 <= region[0] < rows and 0 <= region[1] < cols):
        raise IndexError(f"region {region} outside grid {rows}x{cols}")
    return source.build_batch([t], [region[0]], [region[1]])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Branch(Module):
    """Stage-1 BDLSTM over each window, attention pooling, stage-2 BDLSTM over anchors."""

    _children = ("stage1", "scorer", "stage2")

    def __init__(self, hidden: int, rng: np.random.Generator, name: str):
        self.stage1 = BdLstm(hidden, hidden, rng, f"{name}.stage1")
        self.scorer = AttentionScorer(2 * hidden, 2 * hidden, hidden, rng, f"{name}.attn")
        self.stage2 = BdLstm(2 * hidden, hidden, rng, f"{name}.stage2")

    def __call__(self, feats: Tensor, valid: np.ndarray, context: Tensor) -> Tensor:
        batch, anchors, length, d = feats.shape
        flat = feats.reshape((batch * anchors, length, d))
        outputs, _ = self.stage1(flat, valid.reshape(batch * anchors, length))
        ctx = context[np.repeat(np.arange(batch), anchors)] if anchors > 1 else context
        weights = attention_weights(self.scorer(outputs, ctx))
        pooled = attention_pool(outputs, weights)
        _, final = self.stage2(pooled.reshape((batch, anchors, -1)))
        return final


class Forecaster(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.hidden

        def make_cnn(name):
            return LocalCnn(cfg.patch_size, cfg.conv_layers, cfg.filters, d, rng,
                            cfg.kernel_size, name=name)

        self.branch_names = tuple(cfg.anchor_lags())
        roles = ("short",) + self.branch_names
        if cfg.share_cnn:
            shared = make_cnn("cnn")
            self.cnns = {role: shared for role in roles}
        else:
            self.cnns = {role: make_cnn(f"cnn_{role}") for role in roles}
        self.short = BdLstm(d, d, rng, "short")
        self.branches = {name: Branch(d, rng, name) for name in self.branch_names}
        self.fusion = FusionLayer(2 * d * (1 + len(self.branch_names)), cfg.external_size, rng)

    def cnn_modules(self) -> list[LocalCnn]:
        seen, out = set(), []
        for cnn in self.cnns.values():
            if id(cnn) not in seen:
                seen.add(id(cnn))
                out.append(cnn)
        return out

    def cnn_parameters(self) -> list[Param]:
        return [p for cnn in self.cnn_modules() for p in cnn.parameters()]

    def parameters(self) -> list[Param]:
        out = self.cnn_parameters() + self.short.parameters()
        for name in self.branch_names:
            out += self.branches[name].parameters()
        return out + self.fusion.parameters()

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_cnn_trainable(self, flag: bool) -> None:
        for cnn in self.cnn_modules():
            cnn.set_trainable(flag)

    # -- forward ----------------------------------------------------------

    def _features(self, batch: SampleBatch, bank: dict[str, np.ndarray] | None) -> dict[str, Tensor]:
        groups = {"short": batch.short, **batch.branches}
        rows, cols = batch.rows, batch.cols
        if bank is not None:
            out = {}
            for role, win in groups.items():
                extra = (1,) * (win.times.ndim - 1)
                feats = bank[role][win.times, rows.reshape((-1,) + extra), cols.reshape((-1,) + extra)]
                if win.override is not None and win.override.any():
                    if win.patches is None:
                        raise ValueError(f"{role}: overridden windows need their patches")
                    with nx.no_grad():
                        feats = feats.copy()
                        feats[win.override] = self.cnns[role](win.patches[win.override]).data
                out[role] = Tensor(feats)
            return out
        for role, win in groups.items():
            if win.patches is None:
                raise ValueError(f"{role}: batch built without patches and no feature bank given")
        if self.cfg.share_cnn:
            arrays = [groups[r].patches for r in groups]
            counts = [int(np.prod(a.shape[:-3])) for a in arrays]
            s = self.cfg.patch_size
            stacked = np.concatenate([a.reshape(-1, s, s, 2) for a in arrays], axis=0)
            feats = self.cnns["short"](stacked)
            out, start = {}, 0
            for (role, win), n in zip(groups.items(), counts):
                out[role] = feats[start:start + n].reshape(win.times.shape + (self.cfg.hidden,))
                start += n
            return out
        return {role: self.cnns[role](win.patches) for role, win in groups.items()}

    def forward_batch(self, batch: SampleBatch, bank: dict[str, np.ndarray] | None = None,
                      return_parts: bool = False):
        """Normalized (start, end) predictions, shape [B, 2].

        With ``bank`` (precomputed CNN features per role, [T, R, C, d]) the
        CNN is only run on overridden patches.
        """
        feats = self._features(batch, bank)
        _, context = self.short(feats["short"], batch.short.valid)
        parts = {"context": context}
        for name in self.branch_names:
            try:
                parts[name] = self.branches[name](feats[name], batch.branches[name].valid, context)
            except DimensionError as exc:
                raise DimensionError(f"branch {name!r}: {exc}") from None
        x_c = nx.concat([parts["context"]] + [parts[n] for n in self.branch_names], axis=-1)
        try:
            out = self.fusion(x_c, batch.external)
        except DimensionError as exc:
            raise DimensionError(f"fusion: {exc}") from None
        return (out, parts) if return_parts else out


def forward(model: Forecaster, sample: SampleBatch) -> tuple[float, float]:
    if len(sample) != 1:
        raise DimensionError(f"forward() takes a single sample, got a batch of {len(sample)}")
    with nx.no_grad():
        out = model.forward_batch(sample).data
    return float(out[0, 0]), float(out[0, 1])


def compute_feature_bank(model: Forecaster, source: SampleSource, chunk: int = 4096
                         ) -> dict[str, np.ndarray]:
    """CNN features for every (t, row, col) of ``source``, per branch role."""
    t, rows, cols = source.n_intervals, *source.grid_shape
    tt, rr, cc = np.meshgrid(np.arange(t), np.arange(rows), np.arange(cols), indexing="ij")
    tt, rr, cc = tt.ravel(), rr.ravel(), cc.ravel()
    banks: dict[int, np.ndarray] = {}
    with nx.no_grad():
        for cnn in model.cnn_modules():
            bank = np.empty((tt.size, model.cfg.hidden))
            for lo in range(0, tt.size, chunk):
                hi = lo + chunk
                bank[lo:hi] = cnn(source.patches(tt[lo:hi], rr[lo:hi], cc[lo:hi])).data
            banks[id(cnn)] = bank.reshape(t, rows, cols, model.cfg.hidden)
    return {role: banks[id(cnn)] for role, cnn in model.cnns.items()}


# ---------------------------------------------------------------------------
# multi-step
# ---------------------------------------------------------------------------

def _override_windows(win: Windows, origins: np.ndarray, preds: list[np.ndarray],
                      upper: float, radius: int) -> None:
    extra = (1,) * (win.times.ndim - 1)
    for j, pred in enumerate(preds, start=1):
        hit = win.times == origins.reshape((-1,) + extra) + j
        if not hit.any():
            continue
        if win.override is None:
            win.override = np.zeros(win.times.shape, dtype=bool)
            win.patches = np.array(win.patches, copy=True)
        b = np.nonzero(hit)[0]
        win.patches[hit, radius, radius, :] = pred[b]
        win.valid[hit] = _predicate(pred[b], upper)
        win.override |= hit


def rollout(model: Forecaster, source: SampleSource, times, rows, cols, steps: int,
            bank: dict[str, np.ndarray] | None = None, batch_size: int = 512) -> np.ndarray:
    """Recursive multi-step forecasts for many origins at once, [B, steps, 2].

    Step ``k`` forecasts ``t + k`` from origin ``t + k - 1``, with the
    region's own earlier predictions standing in for the data at
    ``t + 1 .. t + k - 1``. Entries whose origin leaves the grid are NaN.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    times = np.asarray(times, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.full((len(times), steps, 2), np.nan)
    radius = model.cfg.patch_size // 2
    for lo in range(0, len(times), batch_size):
        sl = slice(lo, lo + batch_size)
        t0, r0, c0 = times[sl], rows[sl], cols[sl]
        preds: list[np.ndarray] = []
        for k in range(1, steps + 1):
            ok = t0 + k - 1 < source.n_intervals
            if not ok.any():
                break
            idx = np.flatnonzero(ok)
            batch = source.build_batch(t0[idx] + k - 1, r0[idx], c0[idx])
            if preds:
                sub = [p[idx] for p in preds]
                for win in [batch.short, *batch.branches.values()]:
                    _override_windows(win, t0[idx], sub, source.upper, radius)
            with nx.no_grad():
                y = model.forward_batch(batch, bank).data
            full = np.full((len(t0), 2), np.nan)
            full[idx] = y
            out[lo + idx, k - 1] = y
            preds.append(full)
    return out


def predict_horizon(model: Forecaster, source: SampleSource, region: tuple[int, int], t: int,
                    steps: int) -> list[tuple[float, float]]:
    """Recursive forecasts for one region, rewriting a scratch copy of the grid.

    The result is shorter than ``steps`` when the rollout runs off the end of
    the data.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    row, col = region
    scratch = np.array(source.normalized, copy=True)
    valid = np.array(source.valid, copy=True)
    current = source
    out: list[tuple[float, float]] = []
    for k in range(1, steps + 1):
        origin = t + k - 1
        if origin >= source.n_intervals:
            break
        pred = forward(model, build_sample(current, region, origin))
        out.append(pred)
        if origin + 1 < source.n_intervals and k < steps:
            scratch[origin + 1, row, col] = pred
            valid[origin + 1, row, col] = bool(_predicate(np.array(pred), source.upper))
            current = source.with_values(scratch, valid)
    return out


# ---------------------------------------------------------------------------
# census and checkpoints
# ---------------------------------------------------------------------------

def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    k, f, d, s = cfg.kernel_size, cfg.filters, cfg.hidden, cfg.patch_size
    cnn = (k * k * 2 * f + f) + (cfg.conv_layers - 1) * (k * k * f * f + f) + (s * s * f * d + d)
    n_branch = len(cfg.anchor_lags())
    n_cnn = 1 if cfg.share_cnn else 1 + n_branch

    def lstm(p):
        return 4 * d * (p + d) + 4 * d

    bdlstm = lambda p: 2 * lstm(p)  # noqa: E731
    scorer = d * 2 * d + d * 2 * d + d + d
    branch = bdlstm(d) + scorer + bdlstm(2 * d)
    fusion = 2 * (2 * d * (1 + n_branch) + cfg.external_size) + 2
    return n_cnn * cnn + bdlstm(d) + n_branch * branch + fusion


def save_checkpoint(path: str | os.PathLike, model: Forecaster, meta: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "params": [[p.name, list(p.shape)] for p in model.parameters()],
    }
    if meta:
        header["extra"] = meta
    write_container(path, "checkpoint", {p.name: p.data for p in model.parameters()}, header)


def load_checkpoint(path: str | os.PathLike) -> tuple[Forecaster, dict]:
    arrays, header = read_container(path, "checkpoint")
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path}: checkpoint format {header.get('format')} unsupported")
    model = Forecaster(ModelConfig.from_dict(header["config"]))
    load_state(model, arrays)
    return model, header.get("extra", {})


def state_dict(model: Forecaster) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


def load_state(model: Forecaster, state: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    if set(params) != set(state):
        missing = sorted(set(params) ^ set(state))[:5]
        raise CheckpointMismatch(f"parameter names differ from the model (e.g. {missing})")
    for name, p in params.items():
        arr = state[name]
        if arr.shape != p.shape:
            raise CheckpointMismatch(f"{name}: checkpoint shape {arr.shape}, model {p.shape}")
        p.data[...] = arr
