"""Tick-level order-book snapshot acquisition, persistence, and synthesis.

A snapshot holds the top 10 levels per side. Files carry one snapshot per
row (CSV, level-interleaved ap/av/bp/bv) or per line (JSONL); the JSONL
form doubles as the wire format of the depth-stream collector. Floats are
written with repr so a read/write round trip is lossless.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import queue
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DEPTH = 10

CSV_HEADER = ["ts_ms"] + [
    f"{name}{level}" for level in range(1, DEPTH + 1) for name in ("ap", "av", "bp", "bv")
]


@dataclass(frozen=True)
class LobSnapshot:
    """One tick: timestamp plus 10 (price, volume) levels per side.

    Asks are sorted ascending by price, bids descending, and the best ask
    must sit strictly above the best bid.
    """

    ts: int
    asks: tuple[tuple[float, float], ...]
    bids: tuple[tuple[float, float], ...]

    def validate(self) -> None:
        if len(self.asks) != DEPTH or len(self.bids) != DEPTH:
            raise DataError(f"snapshot at ts={self.ts} must have {DEPTH} levels per side")
        for side, levels in (("ask", self.asks), ("bid", self.bids)):
            for price, volume in levels:
                if not (price > 0.0) or not math.isfinite(price):
                    raise DataError(f"non-positive {side} price {price} at ts={self.ts}")
                if volume < 0.0 or not math.isfinite(volume):
                    raise DataError(f"negative {side} volume {volume} at ts={self.ts}")
        ask_prices = [p for p, _ in self.asks]
        bid_prices = [p for p, _ in self.bids]
        if any(b >= a for a, b in zip(ask_prices[1:], ask_prices)):
            raise DataError(f"ask prices not strictly increasing at ts={self.ts}")
        if any(b <= a for a, b in zip(bid_prices[1:], bid_prices)):
            raise DataError(f"bid prices not strictly decreasing at ts={self.ts}")
        if not ask_prices[0] > bid_prices[0]:
            raise DataError(
                f"crossed book at ts={self.ts}: ask1={ask_prices[0]} <= bid1={bid_prices[0]}"
            )


@dataclass
class TickSeries:
    """Time-ordered snapshots with non-decreasing, de-duplicated timestamps."""

    snapshots: list[LobSnapshot]
    symbol: str = "SYNTH"
    source: str = "unknown"

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i) -> LobSnapshot:
        return self.snapshots[i]

    def timestamps(self) -> np.ndarray:
        return np.array([s.ts for s in self.snapshots], dtype=np.int64)


def _snapshot_from_fields(ts: int, fields: list[float]) -> LobSnapshot:
    asks = tuple((fields[4 * i], fields[4 * i + 1]) for i in range(DEPTH))
    bids = tuple((fields[4 * i + 2], fields[4 * i + 3]) for i in range(DEPTH))
    return LobSnapshot(ts=ts, asks=asks, bids=bids)


def snapshot_to_fields(s: LobSnapshot) -> list[float]:
    out: list[float] = []
    for (ap, av), (bp, bv) in zip(s.asks, s.bids):
        out.extend((ap, av, bp, bv))
    return out


def parse_jsonl_line(line: str) -> LobSnapshot:
    try:
        obj = json.loads(line)
        ts = int(obj["ts"])
        asks = tuple((float(p), float(v)) for p, v in obj["asks"])
        bids = tuple((float(p), float(v)) for p, v in obj["bids"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed JSONL line: {exc}") from exc
    snap = LobSnapshot(ts=ts, asks=asks, bids=bids)
    snap.validate()
    return snap


def _snapshot_to_json(s: LobSnapshot) -> str:
    return json.dumps(
        {"ts": s.ts, "asks": [[p, v] for p, v in s.asks], "bids": [[p, v] for p, v in s.bids]},
        separators=(",", ":"),
    )


def _collect_rows(rows, source: str, symbol: str) -> TickSeries:
    """Apply the ingest ordering contract: duplicates keep the last snapshot
    per timestamp, a timestamp regression is an error."""
    snapshots: list[LobSnapshot] = []
    for row_no, snap in rows:
        if snapshots and snap.ts < snapshots[-1].ts:
            raise DataError(
                f"row {row_no}: timestamp {snap.ts} regresses below {snapshots[-1].ts}"
            )
        if snapshots and snap.ts == snapshots[-1].ts:
            snapshots[-1] = snap
        else:
            snapshots.append(snap)
    if not snapshots:
        raise DataError("no snapshots found in input")
    return TickSeries(snapshots=snapshots, symbol=symbol, source=source)


def read_snapshots(path: str, format: str = "csv", symbol: str = "UNKNOWN") -> TickSeries:
    """Read and validate a snapshot file; raises DataError naming the bad row."""
    if format not in ("csv", "jsonl"):
        raise ConfigError(f"unknown format '{format}'")

    def rows():
        if format == "csv":
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                try:
                    header = next(reader)
                except StopIteration:
                    raise DataError(f"{path}: empty file") from None
                if header != CSV_HEADER:
                    raise DataError(f"{path}: bad CSV header")
                for row_no, row in enumerate(reader, start=2):
                    if len(row) != 1 + 4 * DEPTH:
                        raise DataError(f"{path}:{row_no}: expected {1 + 4 * DEPTH} fields, got {len(row)}")
                    try:
                        ts = int(row[0])
                        fields = [float(x) for x in row[1:]]
                    except ValueError as exc:
                        raise DataError(f"{path}:{row_no}: {exc}") from exc
                    snap = _snapshot_from_fields(ts, fields)
                    try:
                        snap.validate()
                    except DataError as exc:
                        raise DataError(f"{path}:{row_no}: {exc}") from exc
                    yield row_no, snap
        else:
            with open(path) as fh:
                for row_no, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        yield row_no, parse_jsonl_line(line)
                    except DataError as exc:
                        raise DataError(f"{path}:{row_no}: {exc}") from exc

    return _collect_rows(rows(), source=path, symbol=symbol)


def write_snapshots(series: TickSeries, path: str, format: str = "csv") -> None:
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for s in series.snapshots:
                writer.writerow([s.ts] + [repr(float(x)) for x in snapshot_to_fields(s)])
    elif format == "jsonl":
        with open(path, "w") as fh:
            for s in series.snapshots:
                fh.write(_snapshot_to_json(s) + "\n")
    else:
        raise ConfigError(f"unknown format '{format}'")


# -- synthetic data ---------------------------------------------------------


@dataclass
class SynthConfig:
    """Synthetic tick-stream settings.

    Regimes: random_walk (Gaussian steps, balanced labels),
    trend_plus_noise (linear drift + slow sine + iid noise, trend-dominated),
    sawtooth (deterministic triangle wave, perfectly learnable labels).
    Price quantities are expressed in ticks of size tick_size.
    """

    n_ticks: int
    seed: int = 0
    regime: str = "random_walk"
    tick_size: float = 0.01
    base_price: float = 100.0
    spread_ticks: int = 2
    vol_scale: float = 1.0
    start_ts_ms: int = 1_657_843_200_000  # 2022-07-15T00:00:00Z
    interval_ms: int = 100
    walk_ticks: float = 1.0          # random_walk: per-step std
    drift_ticks: float = 0.01        # trend_plus_noise: per-tick drift
    trend_amplitude_ticks: float = 0.0   # trend_plus_noise: sine amplitude
    trend_period: int = 2000         # trend_plus_noise: sine period
    noise_ticks: float = 0.1         # trend_plus_noise: stationary noise std
    noise_rho: float = -0.7          # trend_plus_noise: AR(1) coefficient;
                                     # negative = bid-ask-bounce-style reversion
    period: int = 40                 # sawtooth: triangle period
    amplitude_ticks: float = 20.0    # sawtooth: triangle amplitude

    def validate(self) -> None:
        if self.n_ticks < 1:
            raise ConfigError("n_ticks must be >= 1")
        if self.tick_size <= 0:
            raise ConfigError("tick_size must be > 0")
        if self.base_price <= 0:
            raise ConfigError("base_price must be > 0")
        if self.spread_ticks < 1:
            raise ConfigError("spread_ticks must be >= 1")
        if self.vol_scale <= 0:
            raise ConfigError("vol_scale must be > 0")
        if self.regime not in ("random_walk", "trend_plus_noise", "sawtooth"):
            raise ConfigError(f"unknown regime '{self.regime}'")
        if self.regime == "sawtooth" and self.period < 2:
            raise ConfigError("sawtooth period must be >= 2")
        if not -1.0 < self.noise_rho < 1.0:
            raise ConfigError("noise_rho must be in (-1, 1)")
        if self.interval_ms < 1:
            raise ConfigError("interval_ms must be >= 1")


def _triangle(t: np.ndarray, period: int) -> np.ndarray:
    """Triangle wave in [0, 1]: 0 at t=0, peak 1 at period/2, back to 0.

    The phase comes from an integer modulo so the wave repeats exactly in
    floating point.
    """
    frac = (t.astype(np.int64) % period) / float(period)
    return np.where(frac < 0.5, 2.0 * frac, 2.0 - 2.0 * frac)


def synth_mid_ticks(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(cfg.n_ticks, dtype=np.float64)
    if cfg.regime == "random_walk":
        steps = rng.normal(0.0, cfg.walk_ticks, size=cfg.n_ticks)
        steps[0] = 0.0
        return np.cumsum(steps)
    if cfg.regime == "trend_plus_noise":
        trend = cfg.drift_ticks * t
        if cfg.trend_amplitude_ticks != 0.0:
            trend = trend + cfg.trend_amplitude_ticks * np.sin(2.0 * np.pi * t / cfg.trend_period)
        shocks = rng.normal(0.0, 1.0, size=cfg.n_ticks)
        rho = cfg.noise_rho
        noise = np.empty(cfg.n_ticks)
        noise[0] = cfg.noise_ticks * shocks[0]
        scale = cfg.noise_ticks * math.sqrt(max(1.0 - rho * rho, 0.0))
        for i in range(1, cfg.n_ticks):
            noise[i] = rho * noise[i - 1] + scale * shocks[i]
        return trend + noise
    # sawtooth: triangle rising from 0 to +A at period/2, back to 0
    return cfg.amplitude_ticks * _triangle(t, cfg.period)


def synth_lob(cfg: SynthConfig) -> TickSeries:
    """Deterministic synthetic book: 10 levels one tick apart around the
    regime's mid path, log-normal volumes."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    mids = cfg.base_price + cfg.tick_size * synth_mid_ticks(cfg, rng)
    if np.any(mids - cfg.tick_size * (cfg.spread_ticks / 2.0 + DEPTH) <= 0.0):
        raise ConfigError("synthetic mid path reaches non-positive prices; "
                          "raise base_price or lower volatility")
    half_spread = cfg.spread_ticks * cfg.tick_size / 2.0
    level_offsets = np.arange(DEPTH) * cfg.tick_size
    volumes = cfg.vol_scale * np.exp(rng.normal(0.0, 0.5, size=(cfg.n_ticks, 2, DEPTH)))
    snapshots: list[LobSnapshot] = []
    for i in range(cfg.n_ticks):
        ask1 = mids[i] + half_spread
        bid1 = mids[i] - half_spread
        asks = tuple((float(ask1 + off), float(volumes[i, 0, j])) for j, off in enumerate(level_offsets))
        bids = tuple((float(bid1 - off), float(volumes[i, 1, j])) for j, off in enumerate(level_offsets))
        snapshots.append(LobSnapshot(ts=cfg.start_ts_ms + i * cfg.interval_ms, asks=asks, bids=bids))
    return TickSeries(snapshots=snapshots, symbol="SYNTH", source=f"synth:{cfg.regime}:{cfg.seed}")


# -- depth-stream collection -------------------------------------------------


@dataclass
class IngestReport:
    rows: int = 0
    gaps: int = 0
    protocol_violations: int = 0
    reconnects: int = 0
    errors: list[str] = field(default_factory=list)


class _ReplayHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: ReplayServer = self.server  # type: ignore[assignment]
        sent = 0
        for line in server.lines:
            if server.drop_remaining > 0 and sent == server.drop_after_lines:
                server.drop_remaining -= 1
                return  # simulate a connection drop mid-stream
            try:
                self.request.sendall(line.encode() + b"\n")
            except (BrokenPipeError, ConnectionResetError):
                return
            sent += 1


class ReplayServer(socketserver.ThreadingTCPServer):
    """Serves a JSONL corpus over TCP, one line per message.

    drop_after_lines simulates a transport failure after that many lines on
    the first drop_times connections; later connections replay in full.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, lines: list[str], host: str = "127.0.0.1", port: int = 0,
                 drop_after_lines: int | None = None, drop_times: int = 1):
        super().__init__((host, port), _ReplayHandler)
        self.lines = lines
        self.drop_after_lines = drop_after_lines if drop_after_lines is not None else -1
        self.drop_remaining = drop_times if drop_after_lines is not None else 0
        self._thread: threading.Thread | None = None

    @classmethod
    def from_file(cls, path: str, **kwargs) -> "ReplayServer":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        return cls(lines, **kwargs)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "ReplayServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


_QUEUE_END = object()
_RECONNECTED = object()


def collect_stream(endpoint: str, out_path: str, format: str = "jsonl",
                   reconnects: int = 0, backoff_base: float = 0.05,
                   backoff_cap: float = 2.0, queue_size: int = 1024,
                   timeout: float = 10.0) -> IngestReport:
    """Stream depth messages from host:port into a snapshot file.

    A reader thread feeds raw lines through a bounded queue to the writer so
    ordering equals arrival order. Out-of-order messages are dropped and
    counted as gaps; unparsable messages are logged and skipped. Connection
    loss triggers up to `reconnects` retries with exponential backoff.
    """
    try:
        host, port_str = endpoint.rsplit(":", 1)
        port = int(port_str)
    except ValueError as exc:
        raise ConfigError(f"endpoint must be host:port, got '{endpoint}'") from exc
    if format not in ("csv", "jsonl"):
        raise ConfigError(f"unknown format '{format}'")

    report = IngestReport()
    q: queue.Queue = queue.Queue(maxsize=queue_size)

    def reader():
        attempts_left = reconnects
        delay = backoff_base
        connected_once = False
        while True:
            try:
                with socket.create_connection((host, port), timeout=timeout) as sock:
                    connected_once = True
                    with sock.makefile("rb") as fh:
                        for raw in fh:
                            q.put(raw)
            except OSError as exc:
                if not connected_once and attempts_left <= 0:
                    q.put(exc)
                    return
            if attempts_left <= 0:
                q.put(_QUEUE_END)
                return
            attempts_left -= 1
            q.put(_RECONNECTED)
            time.sleep(delay)
            delay = min(delay * 2.0, backoff_cap)

    thread = threading.Thread(target=reader, daemon=True)
    thread.start()

    pending: LobSnapshot | None = None
    last_ts: int | None = None
    csv_writer = None
    with open(out_path, "w", newline="") as fh:
        if format == "csv":
            csv_writer = csv.writer(fh)
            csv_writer.writerow(CSV_HEADER)

        def emit(snap: LobSnapshot):
            if csv_writer is not None:
                csv_writer.writerow([snap.ts] + [repr(float(x)) for x in snapshot_to_fields(snap)])
            else:
                fh.write(_snapshot_to_json(snap) + "\n")
            report.rows += 1

        while True:
            item = q.get()
            if item is _QUEUE_END:
                break
            if item is _RECONNECTED:
                report.reconnects += 1
                report.gaps += 1  # a dropped connection is a potential data gap
                continue
            if isinstance(item, Exception):
                raise DataError(f"cannot connect to {endpoint}: {item}")
            line = item.decode(errors="replace").strip()
            if not line:
                continue
            try:
                snap = parse_jsonl_line(line)
            except DataError as exc:
                report.protocol_violations += 1
                report.errors.append(str(exc))
                logger.warning("protocol violation: %s", exc)
                continue
            if last_ts is not None and snap.ts < last_ts:
                report.gaps += 1
                continue
            if pending is not None and snap.ts == pending.ts:
                pending = snap  # depth streams replace book state per timestamp
                continue
            if pending is not None:
                emit(pending)
            pending = snap
            last_ts = snap.ts
        if pending is not None:
            emit(pending)
    thread.join(timeout=5.0)
    return report
