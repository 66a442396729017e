"""Stage implementations behind the CLI and the multi-stage pipeline.

Each stage writes its artifact plus one run manifest; the pipeline chains
them (ticks -> labels -> dataset -> model -> report -> ledger -> sweep)
and can resume: a stage is skipped when its manifest still matches both
its inputs and its outputs byte for byte.
"""

from __future__ import annotations

import os
import re
import sys

import numpy as np

from . import checkpoint as ckpt
from . import manifest as mf
from .backtest import BacktestConfig, cost_sweep, run_backtest, sharpe_annualized
from .dataset import (DatasetBundle, DatasetConfig, SplitSpec, build_dataset,
                      config_from_manifest, dataset_manifest)
from .dataset import load_manifest as load_dataset_manifest
from .errors import ConfigError, DataError
from .features import mid_series
from .labeling import LabelConfig, calibrate_threshold, label_series, write_labels
from .market_data import (SynthConfig, collect_stream, read_snapshots, synth_lob,
                          write_snapshots)
from .models import ModelConfig, build_model
from .training import TrainConfig, evaluation_report, predict, train

STANDARD_HORIZONS = (20, 30, 50, 100)
_ADDR_RE = re.compile(r"^[\w.\-]+:\d+$")


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def warn_on_nonstandard_horizon(k: int) -> None:
    if k not in STANDARD_HORIZONS:
        warn(f"horizon k={k} is outside the usual presets {STANDARD_HORIZONS}; continuing")


def is_stream_address(source: str) -> bool:
    return bool(_ADDR_RE.match(source)) and not os.path.exists(source)


def _take(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


# -- config parsing -----------------------------------------------------------


def parse_synth_config(doc: dict, seed: int) -> SynthConfig:
    allowed = set(SynthConfig.__dataclass_fields__)
    _take(doc, allowed, "synth")
    merged = {"seed": seed, **doc}
    try:
        cfg = SynthConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from exc
    cfg.validate()
    return cfg


def parse_split(doc: dict) -> SplitSpec:
    _take(doc, {"mode", "fractions", "days"}, "split")
    spec = SplitSpec(mode=doc.get("mode", "fraction"),
                     fractions=tuple(doc.get("fractions", (0.7, 0.1, 0.2))),
                     days=tuple(doc.get("days", (6, 3, 3))))
    spec.validate()
    return spec


def parse_dataset_config(doc: dict, seed: int) -> DatasetConfig:
    _take(doc, {"task", "lx", "k", "include_mid", "delta", "split"}, "dataset")
    for key in ("task", "lx", "k"):
        if key not in doc:
            raise ConfigError(f"dataset: missing required key '{key}'")
    cfg = DatasetConfig(task=doc["task"], lx=int(doc["lx"]), k=int(doc["k"]),
                        include_mid=bool(doc.get("include_mid", False)),
                        delta=doc.get("delta", "auto"),
                        split=parse_split(doc.get("split", {})), seed=seed)
    cfg.validate()
    return cfg


def parse_model_config(doc: dict, input_dim: int, lx: int, k: int, head: str,
                       seed: int) -> ModelConfig:
    allowed = set(ModelConfig.__dataclass_fields__) - {"input_dim", "lx", "k", "head"}
    _take(doc, allowed, "model")
    if "kind" not in doc:
        raise ConfigError("model: missing required key 'kind'")
    merged = {"input_dim": input_dim, "lx": lx, "k": k, "head": head, "seed": seed, **doc}
    cfg = ModelConfig(**merged)
    cfg.validate()
    return cfg


def parse_train_config(doc: dict, task: str, seed: int) -> TrainConfig:
    _take(doc, {"epochs", "batch_size", "lr", "early_stop_patience"}, "train")
    default_batch = 64 if task == "movement" else 32
    cfg = TrainConfig(epochs=int(doc.get("epochs", 10)),
                      batch_size=int(doc.get("batch_size", default_batch)),
                      lr=float(doc.get("lr", 1e-4)),
                      early_stop_patience=int(doc.get("early_stop_patience", 3)),
                      seed=seed)
    cfg.validate()
    return cfg


def parse_backtest_config(doc: dict) -> BacktestConfig:
    _take(doc, {"shares", "delay", "cost_rate"}, "backtest")
    cfg = BacktestConfig(shares=float(doc.get("shares", 1.0)),
                         delay=int(doc.get("delay", 5)),
                         cost_rate=float(doc.get("cost_rate", 0.0)))
    cfg.validate()
    return cfg


def parse_cost_grid(spec) -> list[float]:
    """Either an explicit list or "start:stop:count" (inclusive ends)."""
    if isinstance(spec, (list, tuple)):
        grid = [float(x) for x in spec]
    elif isinstance(spec, str):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"cost grid '{spec}' must be start:stop:count")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ConfigError("cost grid count must be >= 1")
        grid = np.linspace(start, stop, count).tolist()
    else:
        raise ConfigError(f"unsupported cost grid {spec!r}")
    if not grid or any(b < a for a, b in zip(grid, grid[1:])) or grid[0] < 0:
        raise ConfigError("cost grid must be non-empty, ascending, non-negative")
    return grid


# -- stages -------------------------------------------------------------------


def file_format(path: str, explicit: str | None = None) -> str:
    if explicit:
        return explicit
    return "jsonl" if path.endswith(".jsonl") else "csv"


def stage_synth(cfg: SynthConfig, out_path: str, fmt: str | None = None) -> str:
    fmt = file_format(out_path, fmt)
    series = synth_lob(cfg)
    write_snapshots(series, out_path, format=fmt)
    return mf.write_manifest("synth", {**cfg.__dict__, "format": fmt}, {},
                             {"ticks": out_path}, seed=cfg.seed)


def stage_ingest(source: str, fmt: str | None, out_path: str,
                 reconnects: int = 0) -> str:
    out_fmt = file_format(out_path)
    if is_stream_address(source):
        report = collect_stream(source, out_path, format=out_fmt, reconnects=reconnects)
        config = {"source": source, "format": out_fmt, "reconnects": reconnects,
                  "rows": report.rows, "gaps": report.gaps,
                  "protocol_violations": report.protocol_violations}
        print(f"ingested {report.rows} rows, gaps={report.gaps}, "
              f"violations={report.protocol_violations}")
        return mf.write_manifest("ingest", config, {}, {"ticks": out_path})
    in_fmt = file_format(source, fmt)
    series = read_snapshots(source, format=in_fmt)
    write_snapshots(series, out_path, format=out_fmt)
    print(f"ingested {len(series)} rows")
    return mf.write_manifest("ingest", {"source": source, "format": in_fmt},
                             {"source": source}, {"ticks": out_path})


def stage_label(ticks_path: str, fmt: str | None, horizon_k: int, delta,
                out_path: str) -> str:
    warn_on_nonstandard_horizon(horizon_k)
    series = read_snapshots(ticks_path, format=file_format(ticks_path, fmt))
    if delta == "auto":
        delta_value, shares = calibrate_threshold(series, horizon_k)
        print(f"calibrated delta={delta_value:.6g} shares={np.round(shares, 4).tolist()}")
    else:
        delta_value = float(delta)
    labels = label_series(series, LabelConfig(horizon_k=horizon_k, delta=delta_value))
    write_labels(labels, out_path)
    return mf.write_manifest("label", {"horizon_k": horizon_k, "delta": delta_value},
                             {"ticks": ticks_path}, {"labels": out_path})


def stage_dataset(ticks_path: str, fmt: str | None, cfg: DatasetConfig,
                  out_path: str) -> tuple[DatasetBundle, str]:
    warn_on_nonstandard_horizon(cfg.k)
    series = read_snapshots(ticks_path, format=file_format(ticks_path, fmt))
    bundle = build_dataset(series, cfg)
    doc = dataset_manifest(bundle, ticks_path, mf.sha256_file(ticks_path))
    mf.write_json(out_path, doc)
    run_manifest = mf.write_manifest(
        "dataset",
        {"task": cfg.task, "lx": cfg.lx, "k": cfg.k, "include_mid": cfg.include_mid,
         "delta": bundle.delta, "split": doc["split"], "seed": cfg.seed},
        {"ticks": ticks_path}, {"dataset": out_path}, seed=cfg.seed)
    return bundle, run_manifest


def rebuild_bundle(dataset_manifest_path: str) -> tuple[DatasetBundle, dict]:
    doc = load_dataset_manifest(dataset_manifest_path)
    ticks_path = doc["ticks_path"]
    if not os.path.exists(ticks_path):
        raise DataError(f"ticks file '{ticks_path}' referenced by dataset manifest is missing")
    if mf.sha256_file(ticks_path) != doc["ticks_digest"]:
        raise DataError(f"ticks file '{ticks_path}' changed since the dataset manifest was written")
    series = read_snapshots(ticks_path, format=file_format(ticks_path))
    bundle = build_dataset(series, config_from_manifest(doc))
    return bundle, doc


def stage_train(dataset_manifest_path: str, model_doc: dict, train_doc: dict,
                seed: int, out_path: str) -> str:
    bundle, ds_doc = rebuild_bundle(dataset_manifest_path)
    head = "movement" if bundle.cfg.task == "movement" else "regression_seq"
    input_dim = bundle.train.x.shape[2]
    model_cfg = parse_model_config(model_doc, input_dim, bundle.cfg.lx, bundle.cfg.k,
                                   head, seed)
    train_cfg = parse_train_config(train_doc, bundle.cfg.task, seed)
    model = build_model(model_cfg)
    result = train(model, bundle, train_cfg)
    meta = {"model": model_cfg.to_dict(),
            "train": {"epochs": train_cfg.epochs, "batch_size": train_cfg.batch_size,
                      "lr": train_cfg.lr, "early_stop_patience": train_cfg.early_stop_patience},
            "seed": seed,
            "dataset_manifest": dataset_manifest_path,
            "history": {"train_losses": result.train_losses,
                        "val_losses": result.val_losses,
                        "best_epoch": result.best_epoch,
                        "stopped_epoch": result.stopped_epoch}}
    ckpt.save_checkpoint(out_path, model.parameters(), meta)
    print(f"trained {model_cfg.kind}: best epoch {result.best_epoch}, "
          f"val loss {min(result.val_losses):.6g}")
    return mf.write_manifest("train", meta, {"dataset": dataset_manifest_path},
                             {"checkpoint": out_path, "checkpoint_meta": out_path + ".json"},
                             seed=seed)


def load_model(ckpt_path: str):
    meta = ckpt.load_meta(ckpt_path)
    model = build_model(ModelConfig.from_dict(meta["model"]))
    ckpt.restore_into(model.parameters(), ckpt.load_arrays(ckpt_path))
    return model, meta


def write_signals(path: str, anchor_ts: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("ts_ms,label\n")
        for ts, lab in zip(anchor_ts, labels):
            fh.write(f"{int(ts)},{int(lab)}\n")


def read_signals(path: str) -> tuple[np.ndarray, np.ndarray]:
    ts, labels = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "ts_ms,label":
            raise DataError(f"{path}: bad signals header")
        for line in fh:
            a, b = line.strip().split(",")
            ts.append(int(a))
            labels.append(int(b))
    if not ts:
        raise DataError(f"{path}: empty signals file")
    return np.array(ts, dtype=np.int64), np.array(labels)


def stage_eval(ckpt_path: str, dataset_manifest_path: str, out_path: str,
               signals_out: str | None = None) -> str:
    model, meta = load_model(ckpt_path)
    bundle, _ = rebuild_bundle(dataset_manifest_path)
    report = evaluation_report(model, bundle, "test")
    mf.write_json(out_path, report)
    outputs = {"report": out_path}
    if signals_out is not None:
        if bundle.cfg.task != "movement":
            raise ConfigError("signals output requires a movement-task dataset")
        preds = predict(model, bundle.test)
        write_signals(signals_out, bundle.test.anchor_ts, preds)
        outputs["signals"] = signals_out
    if "classification" in report:
        print(f"test accuracy {report['classification']['accuracy']:.4f}")
    else:
        print(f"test mse {report['regression']['mse']:.6g} "
              f"r2 {report['regression']['r2_oos']:.4f}")
    return mf.write_manifest("eval", {"checkpoint": ckpt_path},
                             {"checkpoint": ckpt_path, "dataset": dataset_manifest_path},
                             outputs)


def align_signals_to_ticks(signal_ts: np.ndarray, series) -> slice:
    ts = series.timestamps()
    start = int(np.searchsorted(ts, signal_ts[0]))
    end = start + len(signal_ts)
    if end > len(ts) or not np.array_equal(ts[start:end], signal_ts):
        raise DataError("signal timestamps do not match a contiguous tick range")
    return slice(start, end)


def stage_backtest(signals_path: str, ticks_path: str, fmt: str | None,
                   cfg: BacktestConfig, out_path: str,
                   equity_out: str | None = None) -> str:
    series = read_snapshots(ticks_path, format=file_format(ticks_path, fmt))
    signal_ts, labels = read_signals(signals_path)
    window = align_signals_to_ticks(signal_ts, series)
    mids = mid_series(series)[window]
    ledger = run_backtest(labels, mids, cfg, ts_ms=signal_ts)
    try:
        sharpe = sharpe_annualized(ledger.daily_cpr) if len(ledger.daily_cpr) >= 2 else None
    except DataError:
        sharpe = None
    doc = {
        "config": {"shares": cfg.shares, "delay": cfg.delay, "cost_rate": cfg.cost_rate},
        "cpr": ledger.cpr(),
        "realized_pnl": ledger.realized_pnl,
        "open_position_mtm": ledger.open_mtm,
        "sharpe_annualized": sharpe,
        "n_trades": len(ledger.trades),
        "daily_cpr": ledger.daily_cpr,
        "trades": [{"side": t.side, "open_ts": t.open_ts, "close_ts": t.close_ts,
                    "open_price": t.open_price, "close_price": t.close_price,
                    "pnl": t.pnl} for t in ledger.trades],
    }
    mf.write_json(out_path, doc)
    outputs = {"ledger": out_path}
    if equity_out is not None:
        with open(equity_out, "w") as fh:
            fh.write("ts_ms,equity\n")
            for ts, eq in zip(signal_ts, ledger.equity):
                fh.write(f"{int(ts)},{repr(float(eq))}\n")
        outputs["equity"] = equity_out
    print(f"backtest cpr={ledger.cpr():.6g} trades={len(ledger.trades)}")
    return mf.write_manifest("backtest", doc["config"],
                             {"signals": signals_path, "ticks": ticks_path}, outputs)


def stage_sweep(signals_path: str, ticks_path: str, fmt: str | None,
                cfg: BacktestConfig, grid: list[float], out_path: str) -> str:
    series = read_snapshots(ticks_path, format=file_format(ticks_path, fmt))
    signal_ts, labels = read_signals(signals_path)
    window = align_signals_to_ticks(signal_ts, series)
    mids = mid_series(series)[window]
    rows = cost_sweep(labels, mids, cfg, grid, ts_ms=signal_ts)
    mf.write_json(out_path, {"rows": rows})
    csv_path = os.path.splitext(out_path)[0] + ".csv"
    with open(csv_path, "w") as fh:
        fh.write("cost_rate,cpr,sharpe\n")
        for row in rows:
            sharpe = "" if row["sharpe"] is None else repr(row["sharpe"])
            fh.write(f"{repr(row['cost_rate'])},{repr(row['cpr'])},{sharpe}\n")
    print(f"sweep over {len(rows)} cost levels: cpr {rows[0]['cpr']:.6g} -> {rows[-1]['cpr']:.6g}")
    return mf.write_manifest("sweep", {"cost_grid": grid, "delay": cfg.delay,
                                       "shares": cfg.shares},
                             {"signals": signals_path, "ticks": ticks_path},
                             {"sweep": out_path, "sweep_csv": csv_path})


# -- pipeline -----------------------------------------------------------------

PIPELINE_KEYS = {"seed", "out_dir", "synth", "ticks", "format", "label", "dataset",
                 "model", "train", "backtest", "sweep"}


def _stage_fresh(manifest_file: str, config: dict, resume: bool) -> bool:
    """True when the stage must run; False when its manifest still matches."""
    if not resume or not os.path.exists(manifest_file):
        return True
    try:
        doc = mf.load_manifest(manifest_file)
    except (ConfigError, ValueError):
        return True
    return not (doc["config"] == config and mf.inputs_match(doc) and mf.outputs_match(doc))


def run_pipeline(config: dict, out_dir: str, resume: bool = True) -> dict:
    """Execute synth/ingest -> label -> dataset -> train -> eval -> backtest
    -> sweep per the config; returns the artifact paths."""
    _take(config, PIPELINE_KEYS, "pipeline config")
    for key in ("dataset", "model"):
        if key not in config:
            raise ConfigError(f"pipeline config: missing required section '{key}'")
    if ("synth" in config) == ("ticks" in config):
        raise ConfigError("pipeline config: provide exactly one of 'synth' or 'ticks'")
    seed = int(config.get("seed", 0))
    os.makedirs(out_dir, exist_ok=True)
    paths = {"out_dir": out_dir}

    # data stage
    if "synth" in config:
        synth_cfg = parse_synth_config(config["synth"], seed)
        ticks_path = os.path.join(out_dir, "ticks.csv")
        stage_cfg = {**synth_cfg.__dict__, "format": "csv"}
        if _stage_fresh(mf.manifest_path(ticks_path), stage_cfg, resume):
            stage_synth(synth_cfg, ticks_path)
    else:
        ticks_path = config["ticks"]
        if not os.path.exists(ticks_path):
            raise DataError(f"ticks file '{ticks_path}' not found")
    paths["ticks"] = ticks_path

    ds_cfg = parse_dataset_config(config["dataset"], seed)
    dataset_path = os.path.join(out_dir, "dataset.json")
    # always rebuilt: cheap relative to training, and later stages need the
    # in-memory bundle anyway
    bundle, _ = stage_dataset(ticks_path, None, ds_cfg, dataset_path)
    paths["dataset"] = dataset_path

    # audit labels for movement runs, at the train-calibrated threshold
    if bundle.cfg.task == "movement":
        labels_path = os.path.join(out_dir, "labels.csv")
        label_cfg = {"horizon_k": ds_cfg.k, "delta": bundle.delta}
        if _stage_fresh(mf.manifest_path(labels_path), label_cfg, resume):
            stage_label(ticks_path, None, ds_cfg.k, bundle.delta, labels_path)
        paths["labels"] = labels_path

    ckpt_path = os.path.join(out_dir, "model.ckpt")
    model_doc = config["model"]
    train_doc = config.get("train", {})
    model_cfg_full = parse_model_config(
        model_doc, bundle.train.x.shape[2], ds_cfg.lx, ds_cfg.k,
        "movement" if ds_cfg.task == "movement" else "regression_seq", seed)
    train_cfg = parse_train_config(train_doc, ds_cfg.task, seed)
    expected_train_cfg = {"model": model_cfg_full.to_dict(),
                          "train": {"epochs": train_cfg.epochs,
                                    "batch_size": train_cfg.batch_size,
                                    "lr": train_cfg.lr,
                                    "early_stop_patience": train_cfg.early_stop_patience},
                          "seed": seed,
                          "dataset_manifest": dataset_path}
    manifest_file = mf.manifest_path(ckpt_path)
    needs_train = True
    if resume and os.path.exists(manifest_file):
        try:
            doc = mf.load_manifest(manifest_file)
            stored = {k: doc["config"].get(k) for k in expected_train_cfg}
            needs_train = not (stored == expected_train_cfg and mf.inputs_match(doc)
                               and mf.outputs_match(doc))
        except (ConfigError, ValueError, KeyError):
            needs_train = True
    if needs_train:
        stage_train(dataset_path, model_doc, train_doc, seed, ckpt_path)
    paths["checkpoint"] = ckpt_path

    report_path = os.path.join(out_dir, "report.json")
    signals_path = os.path.join(out_dir, "signals.csv") if ds_cfg.task == "movement" else None
    stage_eval(ckpt_path, dataset_path, report_path, signals_out=signals_path)
    paths["report"] = report_path
    if signals_path:
        paths["signals"] = signals_path

    if ds_cfg.task == "movement" and "backtest" in config:
        bt_cfg = parse_backtest_config(config["backtest"])
        ledger_path = os.path.join(out_dir, "ledger.json")
        equity_path = os.path.join(out_dir, "equity.csv")
        stage_backtest(signals_path, ticks_path, None, bt_cfg, ledger_path, equity_path)
        paths["ledger"] = ledger_path
        paths["equity"] = equity_path
        if "sweep" in config:
            _take(config["sweep"], {"cost_grid"}, "sweep")
            grid = parse_cost_grid(config["sweep"].get("cost_grid", [0.0]))
            sweep_path = os.path.join(out_dir, "sweep.json")
            stage_sweep(signals_path, ticks_path, None, bt_cfg, grid, sweep_path)
            paths["sweep"] = sweep_path

    pipeline_manifest = os.path.join(out_dir, "pipeline.manifest.json")
    stage_manifests = {}
    for name, path in paths.items():
        candidate = mf.manifest_path(path)
        if name not in ("out_dir",) and os.path.exists(candidate):
            stage_manifests[name] = {"path": candidate, "sha256": mf.sha256_file(candidate)}
    mf.write_json(pipeline_manifest, {
        "tool": "lobforge",
        "command": "pipeline",
        "config": config,
        "seed": seed,
        "artifacts": {k: v for k, v in paths.items() if k != "out_dir"},
        "stage_manifests": stage_manifests,
    })
    paths["manifest"] = pipeline_manifest
    return paths
