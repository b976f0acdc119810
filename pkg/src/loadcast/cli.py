"""Command-line pipeline: validate data, train the model grid, forecast.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
Reruns with identical settings (including both seeds) produce byte-identical
output files; grid jobs are independent and may run in a process pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import data as data_mod
from . import forecast as forecast_mod
from . import model as model_mod
from .model import DivergenceError, ModelSpec, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3

GRID_KIND_ORDER = ("lstm", "bilstm", "gru", "convlstm", "rnn")

DEFAULTS = {
    "data": None,
    "out": "out",
    "cells": "lstm,bilstm,gru,convlstm",
    "windows": "3,4,5,6,7",
    "epochs": 200,
    "lr": 0.001,
    "batch": 32,
    "seed_init": 1,
    "seed_shuffle": 1,
    "jobs": 1,
    "horizon": 2025,
    "entities": ",".join(data_mod.G20_ENTITIES),
    "allow_off_paper": False,
}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    data: Path
    out: Path
    cells: tuple[str, ...]
    windows: tuple[int, ...]
    epochs: int
    lr: float
    batch: int
    seed_init: int
    seed_shuffle: int
    jobs: int
    horizon: int
    entities: tuple[str, ...]
    allow_off_paper: bool

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.epochs,
            learning_rate=self.lr,
            batch_size=self.batch,
            shuffle_seed=self.seed_shuffle,
        )


def _split_list(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value]
    return [part.strip() for part in str(value).split(",") if part.strip()]


def _merge_config(args: argparse.Namespace) -> RunConfig:
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        try:
            loaded = json.loads(cfg_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"bad config file {cfg_path}: {e}") from e
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(loaded)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None and v is not False:
            merged[key] = v

    if not merged["data"]:
        raise UsageError("--data is required")
    cells = tuple(_split_list(merged["cells"]))
    for kind in cells:
        if kind not in model_mod.MODEL_KINDS:
            raise UsageError(f"unknown cell kind {kind!r} (choose from {model_mod.MODEL_KINDS})")
    if len(set(cells)) != len(cells):
        raise UsageError("duplicate cell kinds requested")
    try:
        windows = tuple(int(w) for w in _split_list(merged["windows"]))
    except ValueError:
        raise UsageError(f"bad window list {merged['windows']!r}") from None
    off_paper = [w for w in windows if w < 3 or w > 7]
    if off_paper and not merged["allow_off_paper"]:
        raise UsageError(
            f"window sizes {off_paper} are outside the supported 3-7 range; "
            "pass --allow-off-paper to run them anyway"
        )
    entities = tuple(_split_list(merged["entities"]))
    return RunConfig(
        data=Path(merged["data"]),
        out=Path(merged["out"]),
        cells=cells,
        windows=windows,
        epochs=int(merged["epochs"]),
        lr=float(merged["lr"]),
        batch=int(merged["batch"]),
        seed_init=int(merged["seed_init"]),
        seed_shuffle=int(merged["seed_shuffle"]),
        jobs=int(merged["jobs"]),
        horizon=int(merged["horizon"]),
        entities=entities,
        allow_off_paper=bool(merged["allow_off_paper"]),
    )


def _atomic_write(path: Path, content: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(content, str):
        tmp.write_text(content, encoding="utf-8")
    else:
        tmp.write_bytes(content)
    os.replace(tmp, path)


def _slug(entity: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in entity.lower())


def _load_pipeline_inputs(cfg: RunConfig):
    series = data_mod.load_csv(cfg.data)
    roster = data_mod.filter_entities(series, cfg.entities)
    split_spec = data_mod.SplitSpec()
    train_series = []
    test_pairs = {}
    histories = {}
    for s in roster:
        train, pairs = data_mod.split(s, split_spec)
        train_series.append(train)
        test_pairs[s.entity] = pairs
        histories[s.entity] = s
    scaler = data_mod.fit_scaler(train_series)
    assert scaler.fit_year_max <= split_spec.train_years[1], "scaler saw test years"
    return train_series, test_pairs, histories, scaler, split_spec


def _grid_job(payload):
    """One (cell kind, window) training + evaluation; isolated per process."""
    kind, window, dataset, train_cfg, seed_init, scaler, test_pairs, histories = payload
    spec = ModelSpec(cell_kind=kind, window_size=window)
    try:
        trained = model_mod.train(spec, dataset, train_cfg, seed_init)
    except DivergenceError as e:
        return kind, window, None, str(e), None
    mae = forecast_mod.evaluate(trained, test_pairs, scaler, histories)
    return kind, window, mae, None, model_mod.checkpoint_save(trained)


def cmd_validate(args) -> int:
    path = Path(args.data) if args.data else None
    if path is None:
        raise UsageError("--data is required")
    series = data_mod.load_csv(path)
    if not series:
        raise data_mod.FormatError(f"{path}: no data rows")
    y0 = min(s.first_year for s in series)
    y1 = max(s.last_year for s in series)
    print(f"{len(series)} entities, {y0}-{y1}, OK")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _merge_config(args)
    train_series, test_pairs, histories, scaler, _ = _load_pipeline_inputs(cfg)
    train_cfg = cfg.train_config()
    datasets = {n: data_mod.make_windows(train_series, n, scaler) for n in cfg.windows}

    payloads = [
        (kind, window, datasets[window], train_cfg, cfg.seed_init, scaler, test_pairs, histories)
        for kind in cfg.cells
        for window in cfg.windows
    ]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_grid_job, payloads))
    else:
        results = [_grid_job(p) for p in payloads]

    mae: dict[tuple[str, int], float | None] = {}
    failures = []
    for kind, window, value, error, ckpt in results:
        mae[(kind, window)] = value
        if error is not None:
            failures.append((kind, window, error))
            print(f"job {kind} w{window} failed: {error}", file=sys.stderr)
        else:
            _atomic_write(cfg.out / "checkpoints" / f"{kind}_w{window}.rcfc", ckpt)

    kinds = [k for k in GRID_KIND_ORDER if k in cfg.cells]
    lines = [
        f"# loadcast train grid: seed_init={cfg.seed_init} seed_shuffle={cfg.seed_shuffle} "
        f"epochs={cfg.epochs} lr={cfg.lr} batch={cfg.batch} data={cfg.data}",
        "window," + ",".join(kinds),
    ]
    for window in cfg.windows:
        row = [str(window)]
        for kind in kinds:
            value = mae[(kind, window)]
            row.append("failed" if value is None else f"{value:.6f}")
        lines.append(",".join(row))
    _atomic_write(cfg.out / "mae_table.csv", "\n".join(lines) + "\n")
    print(f"wrote {cfg.out / 'mae_table.csv'} ({len(payloads)} jobs, {len(failures)} failed)")
    return EXIT_DIVERGENCE if failures else EXIT_OK


def cmd_forecast(args) -> int:
    cfg = _merge_config(args)
    if cfg.horizon < 2020:
        raise UsageError(f"horizon must be >= 2020, got {cfg.horizon}")
    models = {}
    for ckpt_path in args.checkpoints:
        p = Path(ckpt_path)
        if not p.exists():
            raise FileNotFoundError(f"checkpoint not found: {p}")
        trained = model_mod.checkpoint_load(p.read_bytes())
        label = trained.spec.cell_kind
        if label in models:
            raise UsageError(f"two checkpoints for cell kind {label!r}")
        models[label] = trained

    _, _, histories, scaler, split_spec = _load_pipeline_inputs(cfg)
    for label, trained in models.items():
        if trained.scaler_ref and trained.scaler_ref != scaler.fingerprint():
            print(
                f"warning: {label} checkpoint was trained with different scaling bounds "
                f"({trained.scaler_ref} != {scaler.fingerprint()})",
                file=sys.stderr,
            )

    report = forecast_mod.build_report(models, histories, scaler, split_spec, cfg.horizon)
    growth = forecast_mod.growth_summary(report)
    for entity in sorted(histories):
        _atomic_write(cfg.out / f"forecast_{_slug(entity)}.csv", forecast_mod.emit_plot_series(report, entity))

    lines = [
        f"# growth = mean over entities of (prediction for {cfg.horizon} - last observed value); "
        f"horizon={cfg.horizon} data={cfg.data}",
        "model,window,seed_init,seed_shuffle,mean_growth_twh",
    ]
    for label in sorted(models):
        m = models[label]
        lines.append(
            f"{label},{m.spec.window_size},{m.seed_init},{m.seed_shuffle},{growth[label]:.6f}"
        )
    _atomic_write(cfg.out / "growth_summary.csv", "\n".join(lines) + "\n")
    print(f"wrote {len(histories)} forecast series and {cfg.out / 'growth_summary.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="loadcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--data", help="input consumption CSV")
        p.add_argument("--out", help="output directory (default: out)")
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--cells", help="comma list of cell kinds")
        p.add_argument("--windows", help="comma list of window sizes (3-7)")
        p.add_argument("--epochs", type=int, help="training epochs (default 200)")
        p.add_argument("--lr", type=float, help="learning rate (default 0.001)")
        p.add_argument("--batch", type=int, help="batch size (default 32)")
        p.add_argument("--seed-init", type=int, dest="seed_init", help="weight init seed")
        p.add_argument("--seed-shuffle", type=int, dest="seed_shuffle", help="shuffle seed")
        p.add_argument("--jobs", type=int, help="parallel grid jobs (default 1)")
        p.add_argument("--horizon", type=int, help="last forecast year (default 2025)")
        p.add_argument("--entities", help="comma list overriding the G-20 roster")
        p.add_argument(
            "--allow-off-paper",
            action="store_true",
            default=None,
            dest="allow_off_paper",
            help="permit window sizes outside 3-7",
        )

    p_validate = sub.add_parser("validate", help="check a consumption CSV")
    p_validate.add_argument("--data", required=False)
    p_validate.set_defaults(func=cmd_validate)

    p_train = sub.add_parser("train", help="train the (cell, window) grid")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_forecast = sub.add_parser("forecast", help="forecast from checkpoints")
    p_forecast.add_argument("checkpoints", nargs="+", help="checkpoint files")
    add_common(p_forecast)
    p_forecast.set_defaults(func=cmd_forecast)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (data_mod.DataError, model_mod.CheckpointFormatError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
