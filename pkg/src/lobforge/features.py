"""Per-tick scalar features and model input vectors from book snapshots.

The canonical flattening order is per-level [ask_price, ask_volume,
bid_price, bid_volume] for levels 1..10, matching the CSV column order, so
file rows and feature vectors never disagree by a permutation.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .market_data import DEPTH, LobSnapshot, TickSeries, snapshot_to_fields


def mid_price(s: LobSnapshot) -> float:
    """Average of best ask and best bid."""
    return (s.asks[0][0] + s.bids[0][0]) / 2.0


def micro_price(s: LobSnapshot, level: int = 1) -> float:
    """Volume-imbalance-weighted price at a level.

    With I = v_bid / (v_ask + v_bid), returns I * p_ask + (1 - I) * p_bid:
    the heavier side pulls the price toward the opposite quote.
    """
    if not 1 <= level <= DEPTH:
        raise ValueError(f"level must be in [1, {DEPTH}], got {level}")
    p_ask, v_ask = s.asks[level - 1]
    p_bid, v_bid = s.bids[level - 1]
    total = v_ask + v_bid
    if total <= 0.0:
        raise DataError(f"zero total volume at level {level} (ts={s.ts})")
    imbalance = v_bid / total
    return imbalance * p_ask + (1.0 - imbalance) * p_bid


def feature_vector(s: LobSnapshot, include_mid: bool = False) -> np.ndarray:
    """Level-interleaved 40-dim vector, optionally with the mid appended."""
    fields = snapshot_to_fields(s)
    if include_mid:
        fields.append(mid_price(s))
    return np.array(fields, dtype=np.float64)


def feature_matrix(series: TickSeries, include_mid: bool = False) -> np.ndarray:
    """(n_ticks, 40 or 41) feature array for a whole series."""
    return np.stack([feature_vector(s, include_mid=include_mid) for s in series.snapshots])


def mid_series(series: TickSeries) -> np.ndarray:
    return np.array([mid_price(s) for s in series.snapshots], dtype=np.float64)


def snapshot_from_features(vec: np.ndarray, ts: int = 0) -> LobSnapshot:
    """Rebuild a snapshot from the first 40 feature entries."""
    if len(vec) < 4 * DEPTH:
        raise ValueError(f"need at least {4 * DEPTH} features, got {len(vec)}")
    asks = tuple((float(vec[4 * i]), float(vec[4 * i + 1])) for i in range(DEPTH))
    bids = tuple((float(vec[4 * i + 2]), float(vec[4 * i + 3])) for i in range(DEPTH))
    return LobSnapshot(ts=ts, asks=asks, bids=bids)
