"""lobforge command line: ingest, synth, label, dataset, train, eval,
backtest, sweep, and pipeline subcommands.

Exit codes: 0 success, 2 config error, 3 data error, 4 training
divergence, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from . import pipeline as pl
from .dataset import DatasetConfig, SplitSpec
from .errors import ConfigError, DataError, DivergenceError, InvariantError
from .market_data import SynthConfig


def _parse_split(text: str) -> SplitSpec:
    """"0.7,0.1,0.2" for fractions or "days:6,3,3" for calendar days."""
    if text.startswith("days:"):
        parts = [int(x) for x in text[len("days:"):].split(",")]
        if len(parts) != 3:
            raise ConfigError(f"split '{text}' needs three day counts")
        return SplitSpec(mode="by_day", days=tuple(parts))
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"split '{text}' needs three fractions")
    return SplitSpec(mode="fraction", fractions=tuple(parts))


def _parse_delta(text: str):
    return "auto" if text == "auto" else float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lobforge",
                                     description="LOB forecasting and trading-simulation toolkit")
    parser.add_argument("--version", action="version", version=f"lobforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read a snapshot file or depth stream into a validated file")
    p.add_argument("--in", dest="source", required=True,
                   help="input path or host:port of a depth stream")
    p.add_argument("--format", choices=("csv", "jsonl"), default=None,
                   help="input format (file ingestion only; default from extension)")
    p.add_argument("--out", required=True)
    p.add_argument("--reconnects", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic tick stream")
    p.add_argument("--regime", choices=("random_walk", "trend_plus_noise", "sawtooth"),
                   default="random_walk")
    p.add_argument("--n-ticks", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tick-size", type=float, default=0.01)
    p.add_argument("--base-price", type=float, default=100.0)
    p.add_argument("--spread-ticks", type=int, default=2)
    p.add_argument("--vol-scale", type=float, default=1.0)
    p.add_argument("--walk-ticks", type=float, default=1.0)
    p.add_argument("--drift-ticks", type=float, default=0.01)
    p.add_argument("--trend-amplitude-ticks", type=float, default=0.0)
    p.add_argument("--trend-period", type=int, default=2000)
    p.add_argument("--noise-ticks", type=float, default=0.1)
    p.add_argument("--period", type=int, default=40)
    p.add_argument("--amplitude-ticks", type=float, default=20.0)
    p.add_argument("--interval-ms", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("label", help="write smoothed movement labels for a tick file")
    p.add_argument("--in", dest="ticks", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--delta", type=_parse_delta, default="auto",
                   help="threshold on the fractional change, or 'auto' to calibrate")
    p.add_argument("--out", required=True)

    p = sub.add_parser("dataset", help="fit normalization and persist a dataset manifest")
    p.add_argument("--in", dest="ticks", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.add_argument("--task", choices=("mid_price", "mid_diff", "movement"), required=True)
    p.add_argument("--lx", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--include-mid", action="store_true")
    p.add_argument("--delta", type=_parse_delta, default="auto")
    p.add_argument("--split", type=_parse_split, default=SplitSpec())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a forecaster against a dataset manifest")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True,
                   choices=("mlp", "lstm", "dlstm", "seq2seq", "attention", "transformer"))
    p.add_argument("--task", default=None,
                   help="cross-checked against the dataset manifest")
    p.add_argument("--k", type=int, default=None,
                   help="cross-checked against the dataset manifest")
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--n-heads", type=int, default=None)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--decompose-window", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its dataset's test split")
    p.add_argument("--model", dest="ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--signals-out", default=None,
                   help="also write predicted movement signals (movement task)")

    p = sub.add_parser("backtest", help="simulate trading on predicted signals")
    p.add_argument("--signals", required=True)
    p.add_argument("--ticks", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.add_argument("--delay", type=int, default=5)
    p.add_argument("--cost", type=float, default=0.0)
    p.add_argument("--shares", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--equity-out", default=None)

    p = sub.add_parser("sweep", help="backtest across a grid of transaction costs")
    p.add_argument("--signals", required=True)
    p.add_argument("--ticks", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.add_argument("--delay", type=int, default=5)
    p.add_argument("--shares", type=float, default=1.0)
    p.add_argument("--cost-grid", required=True,
                   help="start:stop:count or comma-separated rates")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="run all stages from a JSON config")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="pipeline config JSON")
    group.add_argument("--from-manifest", help="re-run the config stored in a pipeline manifest")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--no-resume", action="store_true",
                   help="rerun every stage even when manifests still match")

    return parser


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file '{path}' not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _cmd_train(args) -> None:
    if args.task is not None or args.k is not None:
        from .dataset import load_manifest as load_ds_manifest
        doc = load_ds_manifest(args.dataset)
        if args.task is not None and doc["task"] != args.task:
            raise ConfigError(f"--task {args.task} does not match dataset task '{doc['task']}'")
        if args.k is not None and doc["k"] != args.k:
            raise ConfigError(f"--k {args.k} does not match dataset horizon {doc['k']}")
    model_doc = {"kind": args.model}
    for key in ("hidden_dim", "d_model", "n_heads", "ffn_dim", "decompose_window"):
        value = getattr(args, key)
        if value is not None:
            model_doc[key] = value
    train_doc = {}
    for key, dest in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("lr", "lr"), ("early_stop_patience", "patience")):
        value = getattr(args, dest)
        if value is not None:
            train_doc[key] = value
    pl.stage_train(args.dataset, model_doc, train_doc, args.seed, args.out)


def _cmd_pipeline(args) -> None:
    if args.from_manifest:
        doc = _load_json(args.from_manifest)
        if doc.get("command") != "pipeline" or "config" not in doc:
            raise ConfigError(f"{args.from_manifest}: not a pipeline manifest")
        config = doc["config"]
        out_dir = args.out_dir or config.get("out_dir")
    else:
        config = _load_json(args.config)
        out_dir = args.out_dir or config.get("out_dir")
    if not out_dir:
        raise ConfigError("pipeline needs --out-dir or an out_dir config key")
    paths = pl.run_pipeline(config, out_dir, resume=not args.no_resume)
    print(f"pipeline complete: {paths['manifest']}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "ingest":
            pl.stage_ingest(args.source, args.format, args.out, reconnects=args.reconnects)
        elif args.command == "synth":
            cfg = SynthConfig(
                n_ticks=args.n_ticks, seed=args.seed, regime=args.regime,
                tick_size=args.tick_size, base_price=args.base_price,
                spread_ticks=args.spread_ticks, vol_scale=args.vol_scale,
                interval_ms=args.interval_ms, walk_ticks=args.walk_ticks,
                drift_ticks=args.drift_ticks,
                trend_amplitude_ticks=args.trend_amplitude_ticks,
                trend_period=args.trend_period, noise_ticks=args.noise_ticks,
                period=args.period, amplitude_ticks=args.amplitude_ticks)
            pl.stage_synth(cfg, args.out)
        elif args.command == "label":
            pl.stage_label(args.ticks, args.format, args.horizon, args.delta, args.out)
        elif args.command == "dataset":
            cfg = DatasetConfig(task=args.task, lx=args.lx, k=args.k,
                                include_mid=args.include_mid, delta=args.delta,
                                split=args.split, seed=args.seed)
            pl.stage_dataset(args.ticks, args.format, cfg, args.out)
        elif args.command == "train":
            _cmd_train(args)
        elif args.command == "eval":
            pl.stage_eval(args.ckpt, args.dataset, args.out, signals_out=args.signals_out)
        elif args.command == "backtest":
            from .backtest import BacktestConfig
            cfg = BacktestConfig(shares=args.shares, delay=args.delay, cost_rate=args.cost)
            pl.stage_backtest(args.signals, args.ticks, args.format, cfg,
                              args.out, equity_out=args.equity_out)
        elif args.command == "sweep":
            from .backtest import BacktestConfig
            cfg = BacktestConfig(shares=args.shares, delay=args.delay, cost_rate=0.0)
            grid = pl.parse_cost_grid(args.cost_grid if ":" in args.cost_grid
                                      else [float(x) for x in args.cost_grid.split(",")])
            pl.stage_sweep(args.signals, args.ticks, args.format, cfg, grid, args.out)
        elif args.command == "pipeline":
            _cmd_pipeline(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except InvariantError as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
