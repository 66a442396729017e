"""Signal-driven trading simulation with execution delay and commissions.

A rise signal (2) opens or reverses into a long position, a fall signal
(0) into a short, stationary (1) holds; at most one position exists at a
time and a close immediately opens the opposite side. The signal emitted
at tick t takes effect at tick t + delay, fills happen at the mid-price,
and a per-side commission of cost_rate * price * shares is realized when
a round trip closes. A position still open at the end is marked to the
final mid at price only; its costs would realize on the close that never
happened.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

FALL, STATIONARY, RISE = 0, 1, 2
MS_PER_DAY = 86_400_000


@dataclass
class BacktestConfig:
    shares: float = 1.0
    delay: int = 5
    cost_rate: float = 0.0

    def validate(self) -> None:
        if self.shares <= 0:
            raise ConfigError("shares must be > 0")
        if self.delay < 0:
            raise ConfigError("delay must be >= 0")
        if self.cost_rate < 0:
            raise ConfigError("cost_rate must be >= 0")


@dataclass(frozen=True)
class Trade:
    side: int              # +1 long, -1 short
    open_tick: int
    close_tick: int
    open_ts: int
    close_ts: int
    open_price: float
    close_price: float
    pnl: float


@dataclass
class BacktestLedger:
    trades: list[Trade]
    equity: np.ndarray                 # per-tick running mark-to-market
    realized_pnl: float
    open_side: int                     # 0 if flat at the end
    open_price: float
    open_mtm: float                    # price-only mark of the end position
    daily_ts: list[int] = field(default_factory=list)   # UTC day ids
    daily_cpr: list[float] = field(default_factory=list)

    def cpr(self) -> float:
        return self.realized_pnl + self.open_mtm


def run_backtest(signals: np.ndarray, mids: np.ndarray, cfg: BacktestConfig,
                 ts_ms: np.ndarray | None = None) -> BacktestLedger:
    signals = np.asarray(signals)
    mids = np.asarray(mids, dtype=float)
    cfg.validate()
    n = len(signals)
    if n == 0:
        raise DataError("empty signal series")
    if len(mids) != n:
        raise DataError(f"signals ({n}) and mids ({len(mids)}) lengths differ")
    if cfg.delay >= n:
        raise DataError(f"delay {cfg.delay} must be below series length {n}")
    if not np.all(np.isin(signals, (FALL, STATIONARY, RISE))):
        raise DataError("signals must be 0, 1, or 2")

    mu = cfg.shares
    cost = cfg.cost_rate
    side = 0
    open_price = 0.0
    open_tick = -1
    realized = 0.0
    trades: list[Trade] = []
    equity = np.zeros(n)

    def close_and_record(t: int, price: float) -> None:
        nonlocal realized
        pnl = side * mu * (price - open_price) - cost * mu * (open_price + price)
        realized += pnl
        trades.append(Trade(side=side, open_tick=open_tick, close_tick=t,
                            open_ts=int(ts_ms[open_tick]) if ts_ms is not None else open_tick,
                            close_ts=int(ts_ms[t]) if ts_ms is not None else t,
                            open_price=open_price, close_price=price, pnl=pnl))

    for t in range(n):
        if t >= cfg.delay:
            sig = signals[t - cfg.delay]
            price = mids[t]
            if sig == RISE and side != 1:
                if side == -1:
                    close_and_record(t, price)
                side = 1
                open_price = price
                open_tick = t
            elif sig == FALL and side != -1:
                if side == 1:
                    close_and_record(t, price)
                side = -1
                open_price = price
                open_tick = t
        equity[t] = realized + (side * mu * (mids[t] - open_price) if side else 0.0)

    open_mtm = side * mu * (mids[-1] - open_price) if side else 0.0
    ledger = BacktestLedger(trades=trades, equity=equity, realized_pnl=realized,
                            open_side=side, open_price=open_price if side else 0.0,
                            open_mtm=open_mtm)
    if ts_ms is not None:
        days = np.asarray(ts_ms, dtype=np.int64) // MS_PER_DAY
        last_of_day = np.flatnonzero(np.diff(days)) .tolist() + [n - 1]
        prev = 0.0
        for idx in last_of_day:
            ledger.daily_ts.append(int(days[idx]))
            ledger.daily_cpr.append(float(equity[idx] - prev))
            prev = float(equity[idx])
    return ledger


def cpr(ledger: BacktestLedger) -> float:
    """Cumulative price return: realized round trips plus the final mark."""
    return ledger.cpr()


def sharpe_annualized(daily_cpr) -> float:
    """sqrt(365) * mean / sample std of the daily returns."""
    daily = np.asarray(daily_cpr, dtype=float)
    if len(daily) < 2:
        raise DataError(f"sharpe needs >= 2 daily returns, got {len(daily)}")
    std = float(daily.std(ddof=1))
    if std == 0.0:
        raise DataError("sharpe undefined: zero variance in daily returns")
    return float(np.sqrt(365.0) * daily.mean() / std)


def cost_sweep(signals: np.ndarray, mids: np.ndarray, cfg: BacktestConfig,
               cost_grid, ts_ms: np.ndarray | None = None) -> list[dict]:
    """One backtest per cost level; the trade set never changes, only pnl."""
    grid = list(cost_grid)
    if not grid:
        raise ConfigError("cost grid must be non-empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ConfigError("cost grid must be sorted ascending")
    rows = []
    for cost in grid:
        run_cfg = BacktestConfig(shares=cfg.shares, delay=cfg.delay, cost_rate=float(cost))
        ledger = run_backtest(signals, mids, run_cfg, ts_ms=ts_ms)
        try:
            sr = sharpe_annualized(ledger.daily_cpr) if len(ledger.daily_cpr) >= 2 else None
        except DataError:
            sr = None
        rows.append({"cost_rate": float(cost), "cpr": ledger.cpr(), "sharpe": sr,
                     "n_trades": len(ledger.trades)})
    return rows
