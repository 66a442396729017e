import numpy as np
import numpy.testing as npt
import pytest

from lobforge import backtest as bt
from lobforge.errors import ConfigError, DataError


def oracle_cpr(signals, mids, delay, cost, mu=1.0):
    """Independent event-by-event replay accumulating cash flows."""
    cash = 0.0
    pos = 0
    entry = 0.0
    for t in range(len(mids)):
        if t < delay:
            continue
        s = signals[t - delay]
        p = mids[t]
        if s == 2 and pos != 1:
            if pos == -1:
                cash += -mu * (p - entry) - cost * mu * (entry + p)
            pos, entry = 1, p
        elif s == 0 and pos != -1:
            if pos == 1:
                cash += mu * (p - entry) - cost * mu * (entry + p)
            pos, entry = -1, p
    if pos != 0:
        cash += pos * mu * (mids[-1] - entry)
    return cash


def random_instance(rng, n=1000):
    signals = rng.integers(0, 3, size=n)
    mids = 100.0 + np.cumsum(rng.normal(0, 0.05, size=n))
    return signals, mids


class TestRunBacktest:
    def test_all_stationary_no_trades(self):
        ledger = bt.run_backtest(np.ones(50, dtype=int), np.full(50, 100.0),
                                 bt.BacktestConfig(delay=0))
        assert ledger.trades == []
        assert ledger.cpr() == 0.0
        npt.assert_array_equal(ledger.equity, np.zeros(50))

    def test_hand_trace_zero_cost(self):
        mids = np.array([100.0, 100.0, 101.0, 101.0])
        signals = np.array([2, 1, 0, 1])
        ledger = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=0, cost_rate=0.0))
        assert len(ledger.trades) == 1
        trade = ledger.trades[0]
        assert (trade.side, trade.open_price, trade.close_price) == (1, 100.0, 101.0)
        assert ledger.cpr() == pytest.approx(1.0)
        # the close also opened a short, marked flat at the end
        assert ledger.open_side == -1
        assert ledger.open_mtm == 0.0

    def test_hand_trace_with_cost(self):
        mids = np.array([100.0, 100.0, 101.0, 101.0])
        signals = np.array([2, 1, 0, 1])
        cost = 0.00002  # 0.002% per side
        ledger = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=0, cost_rate=cost))
        assert ledger.cpr() == pytest.approx(1.0 * (1.0 - cost * 201.0))

    def test_shares_scale_pnl(self):
        mids = np.array([100.0, 100.0, 101.0, 101.0])
        signals = np.array([2, 1, 0, 1])
        base = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=0)).cpr()
        scaled = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=0, shares=3.0)).cpr()
        assert scaled == pytest.approx(3.0 * base)

    def test_delay_shifts_execution(self):
        mids = np.array([100.0, 101.0, 102.0, 103.0, 104.0])
        signals = np.array([2, 1, 1, 1, 1])
        ledger = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=2))
        assert ledger.open_side == 1
        assert ledger.open_price == 102.0  # filled two ticks after the signal

    def test_signal_while_same_side_holds(self):
        mids = np.linspace(100, 101, 6)
        signals = np.array([2, 2, 2, 1, 2, 1])
        ledger = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=0))
        assert ledger.trades == []
        assert ledger.open_side == 1
        assert ledger.open_price == mids[0]

    def test_equity_final_equals_cpr(self):
        rng = np.random.default_rng(5)
        signals, mids = random_instance(rng)
        ledger = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=3, cost_rate=1e-5))
        assert ledger.equity[-1] == pytest.approx(ledger.cpr(), abs=1e-12)

    def test_position_exclusivity(self):
        rng = np.random.default_rng(6)
        signals, mids = random_instance(rng, n=500)
        ledger = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=0))
        closes = [t.close_tick for t in ledger.trades]
        opens = [t.open_tick for t in ledger.trades]
        # trades are chronological and never overlap (reversal shares the tick)
        for i in range(1, len(ledger.trades)):
            assert opens[i] >= closes[i - 1]
        for t in ledger.trades:
            assert t.open_tick < t.close_tick or (t.open_tick == t.close_tick)

    def test_zero_cost_conservation(self):
        rng = np.random.default_rng(7)
        signals, mids = random_instance(rng, n=400)
        ledger = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=0))
        holding_sum = sum(t.side * (t.close_price - t.open_price) for t in ledger.trades)
        assert ledger.cpr() == pytest.approx(holding_sum + ledger.open_mtm, abs=1e-9)

    def test_errors(self):
        with pytest.raises(DataError):
            bt.run_backtest(np.zeros(0, dtype=int), np.zeros(0), bt.BacktestConfig())
        with pytest.raises(DataError):
            bt.run_backtest(np.ones(5, dtype=int), np.ones(4), bt.BacktestConfig())
        with pytest.raises(DataError):
            bt.run_backtest(np.ones(5, dtype=int), np.ones(5), bt.BacktestConfig(delay=5))
        with pytest.raises(DataError):
            bt.run_backtest(np.array([0, 1, 3]), np.ones(3), bt.BacktestConfig(delay=0))


class TestAgainstOracle:
    @pytest.mark.parametrize("delay", [0, 5])
    @pytest.mark.parametrize("cost", [0.0, 0.00002])
    def test_100_random_instances(self, delay, cost):
        rng = np.random.default_rng(1234)
        for _ in range(100):
            signals, mids = random_instance(rng)
            ledger = bt.run_backtest(signals, mids,
                                     bt.BacktestConfig(delay=delay, cost_rate=cost))
            assert ledger.cpr() == pytest.approx(
                oracle_cpr(signals, mids, delay, cost), abs=1e-9)

    def test_delay_equivalence_with_shifted_signals(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            signals, mids = random_instance(rng, n=300)
            d = 4
            shifted = np.concatenate([np.ones(d, dtype=int), signals[:-d]])
            a = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=d)).cpr()
            b = bt.run_backtest(shifted, mids, bt.BacktestConfig(delay=0)).cpr()
            assert a == pytest.approx(b, abs=1e-12)


class TestDailyAndSharpe:
    def test_sharpe_hand_value(self):
        assert bt.sharpe_annualized([1.0, 2.0, 3.0]) == pytest.approx(np.sqrt(365.0) * 2.0)

    def test_sharpe_antisymmetry(self):
        daily = [0.5, -0.2, 1.4, 0.8]
        assert bt.sharpe_annualized([-x for x in daily]) == pytest.approx(
            -bt.sharpe_annualized(daily))

    def test_sharpe_degenerate(self):
        with pytest.raises(DataError):
            bt.sharpe_annualized([1.0])
        with pytest.raises(DataError):
            bt.sharpe_annualized([2.0, 2.0, 2.0])

    def test_daily_cpr_telescopes_to_total(self):
        rng = np.random.default_rng(9)
        n = 600
        signals, mids = random_instance(rng, n=n)
        ts = (np.arange(n, dtype=np.int64) * (bt.MS_PER_DAY // 100))  # 6 days
        ledger = bt.run_backtest(signals, mids, bt.BacktestConfig(delay=2), ts_ms=ts)
        assert len(ledger.daily_cpr) == 6
        assert sum(ledger.daily_cpr) == pytest.approx(ledger.cpr(), abs=1e-9)


class TestCostSweep:
    def test_single_zero_cost_row_matches_base(self):
        rng = np.random.default_rng(10)
        signals, mids = random_instance(rng)
        cfg = bt.BacktestConfig(delay=5)
        rows = bt.cost_sweep(signals, mids, cfg, [0.0])
        base = bt.run_backtest(signals, mids, cfg)
        assert rows[0]["cpr"] == base.cpr()

    def test_cpr_non_increasing_and_trades_fixed(self):
        rng = np.random.default_rng(11)
        grid = np.linspace(0.0, 1e-4, 11)
        for _ in range(10):
            signals, mids = random_instance(rng, n=500)
            rows = bt.cost_sweep(signals, mids, bt.BacktestConfig(delay=5), grid)
            cprs = [r["cpr"] for r in rows]
            assert all(b <= a + 1e-12 for a, b in zip(cprs, cprs[1:]))
            assert len({r["n_trades"] for r in rows}) == 1

    def test_row_matches_standalone_run_exactly(self):
        rng = np.random.default_rng(12)
        signals, mids = random_instance(rng)
        cfg = bt.BacktestConfig(delay=5)
        rows = bt.cost_sweep(signals, mids, cfg, [0.0, 0.00002])
        standalone = bt.run_backtest(signals, mids,
                                     bt.BacktestConfig(delay=5, cost_rate=0.00002))
        assert rows[1]["cpr"] == standalone.cpr()

    def test_grid_validation(self):
        signals = np.ones(10, dtype=int)
        mids = np.full(10, 100.0)
        with pytest.raises(ConfigError):
            bt.cost_sweep(signals, mids, bt.BacktestConfig(delay=0), [])
        with pytest.raises(ConfigError):
            bt.cost_sweep(signals, mids, bt.BacktestConfig(delay=0), [1e-4, 0.0])
