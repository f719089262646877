"""Command-line entry point: ``stforecast --config run.cfg <command>``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .checks import TOLERANCE, layer_checks
from .config import RunConfig, load_config
from .data import CoverageError, Dataset, ScalerStateError, TripFormatError, build_external, \
    parse_trips, rasterize
from .evaluation import EvalReport, evaluate, evaluate_baselines
from .model import CheckpointMismatch, Forecaster, SampleSource, compute_feature_bank, load_checkpoint, \
    rollout, save_checkpoint
from .numeric import ConfigurationError, DimensionError, NumericError
from .storage import ContainerError
from .synthetic import generate, to_dataset
from .training import fit, split_origins

logger = logging.getLogger("stforecast")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5


class GradcheckFailed(RuntimeError):
    pass


def _ensure_dir(cfg: RunConfig) -> None:
    os.makedirs(cfg.output_dir, exist_ok=True)


def _load_dataset(cfg: RunConfig) -> Dataset:
    if not os.path.exists(cfg.dataset_file):
        raise FileNotFoundError(f"{cfg.dataset_file}: no dataset; run 'ingest' or 'synth' first")
    return Dataset.load(cfg.dataset_file)


def _load_model(cfg: RunConfig, ds: Dataset):
    path = cfg.path("checkpoint.stfc")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: no checkpoint; run 'train' first")
    model, _ = load_checkpoint(path)
    if model.cfg.to_dict() != cfg.model.to_dict():
        diff = sorted(k for k, v in cfg.model.to_dict().items() if model.cfg.to_dict().get(k) != v)
        raise CheckpointMismatch(f"{path}: checkpoint disagrees with the config on {diff}")
    if ds.external.features.shape[1] != model.cfg.external_size:
        raise CheckpointMismatch(
            f"{path}: model expects {model.cfg.external_size} external features, "
            f"data has {ds.external.features.shape[1]}")
    return model


def cmd_ingest(cfg: RunConfig, args) -> None:
    if not cfg.trips_csv or not cfg.weather_csv:
        raise FileNotFoundError("ingest needs trips_csv and weather_csv in the config")
    _ensure_dir(cfg)
    ipd = 24 * 60 // cfg.model.interval_minutes
    n = cfg.span_days * ipd
    test_start = n - cfg.test_days * ipd
    if test_start <= 0:
        raise ConfigurationError("test_days leaves no training span")
    reader = parse_trips(cfg.trips_csv)
    grid = rasterize(reader, cfg.bbox_value, cfg.start_time, n, cfg.grid_rows, cfg.grid_cols,
                     cfg.model.interval_minutes)
    external = build_external(cfg.weather_csv, cfg.holidays_csv or None, cfg.start_time, n,
                              cfg.model.interval_minutes, test_start)
    ds = Dataset.from_grid(grid, external, test_start, cfg.mask_upper)
    ds.save(cfg.dataset_file)
    print(f"ingest: {reader.rows} rows ({reader.malformed} malformed), dropped "
          f"start={grid.dropped[0]} end={grid.dropped[1]}, invalid cells "
          f"{int((~ds.mask.valid).sum())} -> {cfg.dataset_file}")


def cmd_synth(cfg: RunConfig, args) -> None:
    _ensure_dir(cfg)
    grid, mask, external, oracle = generate(cfg.synth)
    ds = to_dataset(grid, mask, external, cfg.test_days, cfg.mask_upper)
    ds.save(cfg.dataset_file)
    oracle.save(cfg.path("oracle.stfc"))
    print(f"synth: {grid.values.shape} grid, {int(oracle.corrupted.sum())} corrupted cells "
          f"-> {cfg.dataset_file}")


def cmd_train(cfg: RunConfig, args) -> None:
    _ensure_dir(cfg)
    ds = _load_dataset(cfg)
    source = SampleSource.from_dataset(ds, cfg.model)
    train, val, _ = split_origins(source, ds.test_start, cfg.val_fraction, cfg.validation)
    model = Forecaster(cfg.model, seed=cfg.seed)
    history = fit(model, source, train, val, cfg.train)
    save_checkpoint(cfg.path("checkpoint.stfc"), model, {"best_epoch": history.best_epoch})
    history.write_csv(cfg.path("history.csv"))
    history.write_timing_csv(cfg.path("timing.csv"))
    print(f"train: {history.epochs} epochs, best {history.best_epoch} "
          f"(val {history.val_loss[history.best_epoch - 1]:.6g}) -> {cfg.path('checkpoint.stfc')}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    ds = _load_dataset(cfg)
    model = _load_model(cfg, ds)
    source = SampleSource.from_dataset(ds, cfg.model)
    _, _, test = split_origins(source, ds.test_start, cfg.val_fraction, cfg.validation)
    bank = compute_feature_bank(model, source)
    report = evaluate(model, source, test, ds.grid.values, ds.scaler.denormalize, ds.grid.time_of,
                      cfg.horizons, cfg.mape_floor, cfg.peak_ranges, bank)
    report.to_csv(cfg.path("eval.csv"))
    baselines = evaluate_baselines(ds.grid.values, ds.mask.valid, test, ds.grid.time_of,
                                   cfg.model.intervals_per_day, cfg.model.interval_minutes,
                                   cfg.horizons, cfg.mape_floor, cfg.peak_ranges)
    for name, rep in baselines.items():
        rep.to_csv(cfg.path(f"eval_{name}.csv"))
    step = cfg.model.interval_minutes
    for ch in ("start", "end"):
        print(f"evaluate: {ch} rmse@{step}min model {report.get('all', ch, step).rmse:.4f} "
              f"ha {baselines['historical_average'].get('all', ch, step).rmse:.4f} "
              f"persistence {baselines['persistence'].get('all', ch, step).rmse:.4f}")


def cmd_predict(cfg: RunConfig, args) -> None:
    ds = _load_dataset(cfg)
    model = _load_model(cfg, ds)
    source = SampleSource.from_dataset(ds, cfg.model)
    start = ds.test_start - 1 if args.start is None else args.start
    stop = source.n_intervals - 1 if args.stop is None else args.stop
    origins = source.origins(start, stop, require_valid_target=False)
    if args.region:
        r, c = (int(v) for v in args.region.split(","))
        origins = origins[(origins[:, 1] == r) & (origins[:, 2] == c)]
    if len(origins) == 0:
        raise ConfigurationError("predict: no origins in the requested range")
    preds = rollout(model, source, origins[:, 0], origins[:, 1], origins[:, 2], cfg.horizons,
                    compute_feature_bank(model, source))
    raw = ds.scaler.denormalize(preds)
    path = cfg.path("predictions.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "time", "row", "col", "horizon_minutes", "start", "end"])
        for i, (t, r, c) in enumerate(origins):
            for k in range(cfg.horizons):
                if np.isfinite(raw[i, k]).all():
                    w.writerow([t, ds.grid.time_of(t).isoformat(), r, c,
                                (k + 1) * cfg.model.interval_minutes,
                                repr(float(raw[i, k, 0])), repr(float(raw[i, k, 1]))])
    print(f"predict: {len(origins)} origins x {cfg.horizons} steps -> {path}")


def cmd_gradcheck(cfg: RunConfig, args) -> None:
    started = time.perf_counter()
    results = layer_checks(cfg.gradcheck_eps, cfg.seed)
    for name, err in results.items():
        print(f"gradcheck {name:<12s} max_rel_error {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    worst = max(results.values())
    print(f"gradcheck max {worst:.3e} in {time.perf_counter() - started:.1f}s")
    if worst >= TOLERANCE:
        raise GradcheckFailed(f"max relative error {worst:.3e} >= {TOLERANCE:g}")


def cmd_report(cfg: RunConfig, args) -> None:
    path = cfg.path("eval.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: run 'evaluate' first")
    model = EvalReport.from_csv(path)
    others = {name: EvalReport.from_csv(cfg.path(f"eval_{name}.csv"))
              for name in ("historical_average", "persistence")
              if os.path.exists(cfg.path(f"eval_{name}.csv"))}
    out = cfg.path("report_horizons.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "channel", "horizon_minutes", "model_rmse", "model_mape"]
                   + [f"{n}_rmse" for n in others])
        for row in model.rows:
            key = (row.slice, row.channel, row.horizon_minutes)
            w.writerow([*key, repr(row.rmse), repr(row.mape)]
                       + [repr(rep.get(*key).rmse) for rep in others.values()])
    hist = cfg.path("history.csv")
    written = [out]
    if os.path.exists(hist):
        with open(hist, newline="") as fh:
            rows = list(csv.DictReader(fh))
        best = min(rows, key=lambda r: float(r["val_loss"]))
        summary = cfg.path("report_training.csv")
        with open(summary, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epochs", "best_epoch", "best_val_loss", "final_train_loss"])
            w.writerow([len(rows), best["epoch"], best["val_loss"], rows[-1]["train_loss"]])
        written.append(summary)
    print("report: " + ", ".join(written))


COMMANDS = {
    "ingest": (cmd_ingest, "rasterize trips and weather into a dataset"),
    "synth": (cmd_synth, "generate a synthetic dataset and its oracle"),
    "train": (cmd_train, "train a model, writing a checkpoint and history.csv"),
    "evaluate": (cmd_evaluate, "score the checkpoint and the baselines on the test span"),
    "predict": (cmd_predict, "write multi-step forecasts to predictions.csv"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every layer and the full model"),
    "report": (cmd_report, "merge evaluation and history CSVs into summary tables"),
}


def _common(defaults: bool) -> argparse.ArgumentParser:
    # options accepted before or after the command; the subcommand copy must
    # not overwrite a value given before it
    keep = {} if defaults else {"default": argparse.SUPPRESS}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)",
                        **({"default": None} | keep))
    common.add_argument("--threads", type=int, **({"default": None} | keep),
                        help="cap BLAS worker threads; 1 is the determinism reference")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress", **keep)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stforecast", parents=[_common(True)],
                                     description="Spatio-temporal demand forecasting pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, parents=[_common(False)])
        if name == "predict":
            p.add_argument("--start", type=int, default=None, help="first origin interval")
            p.add_argument("--stop", type=int, default=None, help="origin interval bound (exclusive)")
            p.add_argument("--region", default=None, help="limit to one cell, 'row,col'")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, GradcheckFailed):
        return EXIT_GRADCHECK
    if isinstance(exc, (ConfigurationError, CheckpointMismatch, DimensionError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, ContainerError, TripFormatError, CoverageError, ScalerStateError)):
        return EXIT_IO
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command][0](cfg, args)
    except Exception as exc:  # mapped to exit codes; anything unexpected re-raises
        code = _exit_code(exc)
        print(f"stforecast {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
