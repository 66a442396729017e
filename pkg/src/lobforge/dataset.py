"""Normalized, windowed, chronologically split training data.

Normalization statistics always come from the training split alone
(population std, epsilon guard 1e-8). Windows are built per split on the
split's own sub-series, so no sample's input window, regression target, or
label support can cross a split boundary, and movement labels are
recomputed inside each split with the training-calibrated threshold.
Regression targets get their own training statistics: next-k mid-price
targets reuse the mid-price mean/std, difference targets are fit
separately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .features import feature_matrix, mid_series
from .labeling import LabelConfig, calibrate_threshold, label_series
from .market_data import TickSeries

EPSILON = 1e-8
MS_PER_DAY = 86_400_000

TASKS = ("mid_price", "mid_diff", "movement")


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = EPSILON


def fit_norm(train_features: np.ndarray) -> NormStats:
    """Per-feature mean and population std over training rows only."""
    if train_features.size == 0:
        raise DataError("cannot fit normalization on an empty split")
    return NormStats(mean=train_features.mean(axis=0), std=train_features.std(axis=0))


def apply_norm(features: np.ndarray, stats: NormStats) -> np.ndarray:
    if features.shape[-1] != stats.mean.shape[0]:
        raise DataError(
            f"feature dimension {features.shape[-1]} does not match stats {stats.mean.shape[0]}"
        )
    return (features - stats.mean) / (stats.std + stats.epsilon)


def invert_norm(normalized: np.ndarray, stats: NormStats) -> np.ndarray:
    return normalized * (stats.std + stats.epsilon) + stats.mean


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split: either fractions summing to 1 or whole UTC days."""

    mode: str = "fraction"
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    days: tuple[int, int, int] = (6, 3, 3)

    def validate(self) -> None:
        if self.mode == "fraction":
            if any(f <= 0 for f in self.fractions):
                raise ConfigError("split fractions must be positive")
            if abs(sum(self.fractions) - 1.0) > 1e-9:
                raise ConfigError(f"split fractions must sum to 1, got {self.fractions}")
        elif self.mode == "by_day":
            if any(d < 1 for d in self.days):
                raise ConfigError("each split needs at least one day")
        else:
            raise ConfigError(f"unknown split mode '{self.mode}'")


def split_ranges(ts_ms: np.ndarray, spec: SplitSpec) -> tuple[tuple[int, int], ...]:
    """(start, end) index ranges for train/val/test; contiguous and disjoint."""
    spec.validate()
    n = len(ts_ms)
    if spec.mode == "fraction":
        f_train, f_val, _ = spec.fractions
        a = int(n * f_train)
        b = int(n * (f_train + f_val))
        ranges = ((0, a), (a, b), (b, n))
    else:
        days = ts_ms // MS_PER_DAY
        boundaries = np.flatnonzero(np.diff(days)) + 1
        starts = np.concatenate([[0], boundaries])
        n_days = len(starts)
        want = sum(spec.days)
        if n_days != want:
            raise ConfigError(f"by_day split needs exactly {want} days, found {n_days}")
        ends = np.concatenate([starts[1:], [n]])
        d_train, d_val, _ = spec.days
        ranges = (
            (int(starts[0]), int(ends[d_train - 1])),
            (int(starts[d_train]), int(ends[d_train + d_val - 1])),
            (int(starts[d_train + d_val]), int(ends[-1])),
        )
    if any(e <= s for s, e in ranges):
        raise ConfigError(f"split produces an empty range: {ranges}")
    return ranges


@dataclass(frozen=True)
class DatasetConfig:
    task: str
    lx: int
    k: int
    include_mid: bool = False
    delta: float | str = "auto"  # movement only; "auto" calibrates on train
    split: SplitSpec = SplitSpec()
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}'")
        if self.lx < 1 or self.k < 1:
            raise ConfigError("lx and k must be >= 1")
        self.split.validate()
        if isinstance(self.delta, str) and self.delta != "auto":
            raise ConfigError(f"delta must be a number or 'auto', got '{self.delta}'")


@dataclass
class SplitData:
    """Windowed samples of one chronological split."""

    x: np.ndarray          # (n, lx, d) normalized features
    y: np.ndarray          # (n, k) normalized targets or (n,) int labels
    anchor_ts: np.ndarray  # (n,) timestamp of the last input tick
    anchor_ticks: np.ndarray  # (n,) absolute tick index of the anchor
    window_ts: np.ndarray  # (n, lx) timestamps of the input rows

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class DatasetBundle:
    cfg: DatasetConfig
    feature_stats: NormStats
    target_mean: float
    target_std: float
    delta: float
    train: SplitData
    val: SplitData
    test: SplitData
    ranges: tuple[tuple[int, int], ...]
    label_shares: np.ndarray | None = None


def _window_stack(arr, anchors, lx):
    return np.stack([arr[a - lx + 1 : a + 1] for a in anchors])


def _regression_windows(feats_n, raw_mids, ts, lx, k, task, t_mean, t_std, offset):
    n = len(raw_mids)
    count = n - lx - k + 1
    if count <= 0:
        return None
    anchors = np.arange(lx - 1, n - k)
    x = _window_stack(feats_n, anchors, lx)
    if task == "mid_price":
        y = np.stack([raw_mids[a + 1 : a + k + 1] for a in anchors])
    else:
        y = np.stack([raw_mids[a + 1 : a + k + 1] - raw_mids[a] for a in anchors])
    y = (y - t_mean) / (t_std + EPSILON)
    return SplitData(x=x, y=y, anchor_ts=ts[anchors], anchor_ticks=anchors + offset,
                     window_ts=_window_stack(ts, anchors, lx))


def _movement_windows(feats_n, labels, mask, ts, lx, k, offset):
    n = len(labels)
    anchors = [
        a for a in range(max(lx - 1, k - 1), n - k)
        if mask[a]
    ]
    if not anchors:
        return SplitData(x=np.zeros((0, lx, feats_n.shape[1])), y=np.zeros(0, dtype=int),
                         anchor_ts=np.zeros(0, dtype=np.int64), anchor_ticks=np.zeros(0, dtype=int),
                         window_ts=np.zeros((0, lx), dtype=np.int64))
    anchors = np.array(anchors)
    x = _window_stack(feats_n, anchors, lx)
    return SplitData(x=x, y=labels[anchors].astype(int), anchor_ts=ts[anchors],
                     anchor_ticks=anchors + offset, window_ts=_window_stack(ts, anchors, lx))


def build_dataset(series: TickSeries, cfg: DatasetConfig) -> DatasetBundle:
    """Materialize normalized windows for all three splits."""
    cfg.validate()
    feats = feature_matrix(series, include_mid=cfg.include_mid)
    mids = mid_series(series)
    ts = series.timestamps()
    ranges = split_ranges(ts, cfg.split)
    (tr_s, tr_e), _, _ = ranges

    stats = fit_norm(feats[tr_s:tr_e])
    feats_n = apply_norm(feats, stats)

    delta = 0.0
    label_shares = None
    if cfg.task == "mid_price":
        train_mids = mids[tr_s:tr_e]
        t_mean, t_std = float(train_mids.mean()), float(train_mids.std())
    elif cfg.task == "mid_diff":
        n_tr = tr_e - tr_s
        count = n_tr - cfg.lx - cfg.k + 1
        if count <= 0:
            raise DataError("training split too short for any window")
        anchors = np.arange(cfg.lx - 1, n_tr - cfg.k)
        m = mids[tr_s:tr_e]
        diffs = np.stack([m[a + 1 : a + cfg.k + 1] - m[a] for a in anchors])
        t_mean, t_std = float(diffs.mean()), float(diffs.std())
    else:
        t_mean, t_std = 0.0, 1.0
        sub_train = TickSeries(snapshots=series.snapshots[tr_s:tr_e], symbol=series.symbol)
        if cfg.delta == "auto":
            delta, label_shares = calibrate_threshold(sub_train, cfg.k)
        else:
            delta = float(cfg.delta)

    splits = []
    for (s, e) in ranges:
        sub_feats = feats_n[s:e]
        sub_ts = ts[s:e]
        if cfg.task == "movement":
            sub = TickSeries(snapshots=series.snapshots[s:e], symbol=series.symbol)
            if e - s <= 2 * cfg.k:
                raise DataError(f"split [{s},{e}) too short for horizon {cfg.k}")
            labs = label_series(sub, LabelConfig(horizon_k=cfg.k, delta=delta))
            part = _movement_windows(sub_feats, labs.labels, labs.mask, sub_ts,
                                     cfg.lx, cfg.k, offset=s)
        else:
            part = _regression_windows(sub_feats, mids[s:e], sub_ts,
                                       cfg.lx, cfg.k, cfg.task, t_mean, t_std, offset=s)
            if part is None:
                raise DataError(f"split [{s},{e}) too short for lx={cfg.lx}, k={cfg.k}")
        splits.append(part)

    if len(splits[0]) == 0:
        raise DataError("training split produced no samples")
    return DatasetBundle(cfg=cfg, feature_stats=stats, target_mean=t_mean,
                         target_std=t_std, delta=delta, train=splits[0],
                         val=splits[1], test=splits[2], ranges=ranges,
                         label_shares=label_shares)


def iter_batches(split: SplitData, batch_size: int, seed: int | None = None,
                 epoch: int = 0):
    """Yield (x, y, window_ts) batches; order is a pure function of
    (seed, epoch). seed None means no shuffling (validation/test order is
    always chronological).
    """
    n = len(split)
    order = np.arange(n)
    if seed is not None:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield split.x[idx], split.y[idx], split.window_ts[idx]


# -- manifest persistence ----------------------------------------------------


def dataset_manifest(bundle: DatasetBundle, ticks_path: str, ticks_digest: str) -> dict:
    cfg = bundle.cfg
    return {
        "ticks_path": ticks_path,
        "ticks_digest": ticks_digest,
        "task": cfg.task,
        "lx": cfg.lx,
        "k": cfg.k,
        "include_mid": cfg.include_mid,
        "delta": bundle.delta,
        "split": {"mode": cfg.split.mode, "fractions": list(cfg.split.fractions),
                  "days": list(cfg.split.days)},
        "seed": cfg.seed,
        "epsilon": EPSILON,
        "feature_mean": bundle.feature_stats.mean.tolist(),
        "feature_std": bundle.feature_stats.std.tolist(),
        "target_mean": bundle.target_mean,
        "target_std": bundle.target_std,
        "ranges": [list(r) for r in bundle.ranges],
        "sizes": [len(bundle.train), len(bundle.val), len(bundle.test)],
    }


def config_from_manifest(doc: dict) -> DatasetConfig:
    split = SplitSpec(mode=doc["split"]["mode"],
                      fractions=tuple(doc["split"]["fractions"]),
                      days=tuple(doc["split"]["days"]))
    return DatasetConfig(task=doc["task"], lx=doc["lx"], k=doc["k"],
                         include_mid=doc["include_mid"], delta=doc["delta"],
                         split=split, seed=doc["seed"])


def load_manifest(path: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    required = {"ticks_path", "task", "lx", "k", "include_mid", "delta", "split", "seed"}
    missing = required - doc.keys()
    if missing:
        raise ConfigError(f"{path}: dataset manifest missing keys {sorted(missing)}")
    return doc
