"""Smoothed three-class movement labels and regression targets.

A tick's direction compares the mean of the next k mid-prices against the
mean of the last k (current tick included). The fractional change l_t is
classified with a threshold delta: above +delta is a rise, below -delta a
fall, and the closed band in between is stationary. Ticks without a full
window on both sides are masked, never imputed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .features import mid_series
from .market_data import TickSeries

FALL, STATIONARY, RISE = 0, 1, 2

# Thresholds that balance the three classes on ETH-USDT tick captures;
# useful defaults when no calibration data is at hand.
BALANCED_DELTA_BY_HORIZON = {20: 0.17e-4, 30: 0.3e-4, 50: 0.6e-4, 100: 0.92e-4}


@dataclass(frozen=True)
class LabelConfig:
    horizon_k: int
    delta: float

    def validate(self) -> None:
        if self.horizon_k < 1:
            raise ConfigError("horizon_k must be >= 1")
        if self.delta < 0.0:
            raise ConfigError("delta must be >= 0")


@dataclass
class LabelSeries:
    """Per-tick labels aligned with the source ticks; mask marks validity."""

    ts: np.ndarray          # int64 timestamps
    labels: np.ndarray      # int labels, only meaningful where mask is True
    l_t: np.ndarray         # fractional change, NaN where masked
    mask: np.ndarray        # bool

    def __len__(self) -> int:
        return len(self.labels)

    def class_shares(self) -> np.ndarray:
        valid = self.labels[self.mask]
        if len(valid) == 0:
            return np.zeros(3)
        return np.bincount(valid, minlength=3) / len(valid)


def past_mean(mid: np.ndarray, t: int, k: int) -> float:
    """Mean of mid[t-k+1 .. t]; needs k ticks of history."""
    if t < k - 1:
        raise DataError(f"insufficient history at t={t} for k={k}")
    return float(np.mean(mid[t - k + 1 : t + 1]))


def future_mean(mid: np.ndarray, t: int, k: int) -> float:
    """Mean of mid[t+1 .. t+k]; needs k ticks of future data."""
    if t + k >= len(mid):
        raise DataError(f"insufficient future data at t={t} for k={k}")
    return float(np.mean(mid[t + 1 : t + k + 1]))


def pct_change(m_minus: float, m_plus: float) -> float:
    if m_minus <= 0.0:
        raise DataError(f"non-positive past mean {m_minus}")
    return (m_plus - m_minus) / m_minus


def classify(l_t: float, delta: float) -> int:
    if l_t > delta:
        return RISE
    if l_t < -delta:
        return FALL
    return STATIONARY


def _fractional_changes(mid: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized l_t for all ticks plus the validity mask.

    Valid anchors are t in [k-1, len-k-1]. Means come from a prefix-sum,
    so one pass covers the whole series.
    """
    n = len(mid)
    mask = np.zeros(n, dtype=bool)
    l_t = np.full(n, np.nan)
    if n >= 2 * k:
        csum = np.concatenate([[0.0], np.cumsum(mid)])
        t = np.arange(k - 1, n - k)
        m_minus = (csum[t + 1] - csum[t - k + 1]) / k
        m_plus = (csum[t + k + 1] - csum[t + 1]) / k
        if np.any(m_minus <= 0.0):
            raise DataError("non-positive past mean encountered")
        l_t[t] = (m_plus - m_minus) / m_minus
        mask[t] = True
    return l_t, mask


def label_series(series: TickSeries, cfg: LabelConfig) -> LabelSeries:
    """Label every tick that has k past and k future mid-prices."""
    cfg.validate()
    mid = mid_series(series)
    if len(mid) <= 2 * cfg.horizon_k:
        if len(mid) == 2 * cfg.horizon_k:
            # boundary: zero labelable ticks but a well-formed empty result
            return LabelSeries(series.timestamps(), np.full(len(mid), STATIONARY),
                               np.full(len(mid), np.nan), np.zeros(len(mid), dtype=bool))
        raise DataError(f"series of length {len(mid)} too short for horizon {cfg.horizon_k}")
    l_t, mask = _fractional_changes(mid, cfg.horizon_k)
    labels = np.full(len(mid), STATIONARY)
    valid = mask
    labels[valid & (l_t > cfg.delta)] = RISE
    labels[valid & (l_t < -cfg.delta)] = FALL
    return LabelSeries(series.timestamps(), labels, l_t, mask)


def calibrate_threshold(series: TickSeries, horizon_k: int,
                        n_candidates: int = 200) -> tuple[float, np.ndarray]:
    """Grid-search the delta that best balances the three class shares.

    Candidates are log-spaced between the 1st and 99th percentile of |l_t|;
    the score is max_c |share(c) - 1/3| and ties go to the smallest delta.
    Returns (delta, shares at that delta).
    """
    mid = mid_series(series)
    if len(mid) <= 2 * horizon_k:
        raise DataError(f"series of length {len(mid)} too short for horizon {horizon_k}")
    l_t, mask = _fractional_changes(mid, horizon_k)
    vals = l_t[mask]
    if np.all(vals == vals[0]):
        raise DataError("degenerate series: all fractional changes identical")
    abs_vals = np.abs(vals)
    lo = np.percentile(abs_vals, 1.0)
    hi = np.percentile(abs_vals, 99.0)
    tiny = max(abs_vals.max() * 1e-12, 1e-300)
    lo = max(lo, tiny)
    hi = max(hi, lo * (1.0 + 1e-9))
    grid = np.geomspace(lo, hi, n_candidates)
    n = len(vals)
    best_delta = grid[0]
    best_score = np.inf
    best_shares = np.zeros(3)
    for delta in grid:
        rise = np.count_nonzero(vals > delta)
        fall = np.count_nonzero(vals < -delta)
        shares = np.array([fall, n - rise - fall, rise]) / n
        score = np.abs(shares - 1.0 / 3.0).max()
        if score < best_score:
            best_score = score
            best_delta = float(delta)
            best_shares = shares
    return best_delta, best_shares


def diff_targets(mid: np.ndarray, t: int, k: int) -> np.ndarray:
    """Future mid-price changes mid[t+tau] - mid[t] for tau = 1..k."""
    if t + k >= len(mid):
        raise DataError(f"insufficient future data at t={t} for k={k}")
    return mid[t + 1 : t + k + 1] - mid[t]


def write_labels(labels: LabelSeries, path: str) -> None:
    """CSV with columns ts_ms,label,l_t,mask; masked rows leave label/l_t empty."""
    with open(path, "w") as fh:
        fh.write("ts_ms,label,l_t,mask\n")
        for i in range(len(labels)):
            if labels.mask[i]:
                fh.write(f"{labels.ts[i]},{labels.labels[i]},{repr(float(labels.l_t[i]))},1\n")
            else:
                fh.write(f"{labels.ts[i]},,,0\n")


def read_labels(path: str) -> LabelSeries:
    ts, labs, lts, mask = [], [], [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "ts_ms,label,l_t,mask":
            raise DataError(f"{path}: bad labels header")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 4:
                raise DataError(f"{path}: bad labels row '{line.strip()}'")
            ts.append(int(parts[0]))
            if parts[3] == "1":
                labs.append(int(parts[1]))
                lts.append(float(parts[2]))
                mask.append(True)
            else:
                labs.append(STATIONARY)
                lts.append(np.nan)
                mask.append(False)
    return LabelSeries(np.array(ts, dtype=np.int64), np.array(labs), np.array(lts),
                       np.array(mask, dtype=bool))
