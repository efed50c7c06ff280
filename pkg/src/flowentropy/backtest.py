"""Event-driven execution of the low-entropy trading rule.

One position at a time. A signal at second t enters at the close of the
next bar of the same session; the position exits at the first bar whose
close is at least ``stop_bps`` against the entry (stop), at least the
take-profit in favour (take_profit), or ``timeout_s`` seconds after entry
(timeout). A position still open at the last bar of the session is closed
there (session_close). Exits fill at the triggering bar's close, so gaps
can overshoot the stop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import _kernels
from ._csvio import write_frame
from .ingest import Bars

logger = logging.getLogger(__name__)

EXIT_REASONS = {_kernels.EXIT_STOP: "stop", _kernels.EXIT_TIMEOUT: "timeout",
                _kernels.EXIT_TAKE_PROFIT: "take_profit",
                _kernels.EXIT_SESSION_CLOSE: "session_close"}
TRADE_COLUMNS = ["entry_ts", "exit_ts", "direction", "entry_px", "exit_px", "exit_reason",
                 "gross_bps", "net_bps"]


class ProtocolError(Exception):
    """Walk-forward protocol violation (overlapping folds, look-ahead)."""


@dataclass(frozen=True)
class CostModel:
    half_spread_bps: float = 0.085
    slippage_bps: float = 0.30
    fees_bps: float = 0.10

    def __post_init__(self):
        if min(self.half_spread_bps, self.slippage_bps, self.fees_bps) < 0:
            raise ValueError("cost components must be non-negative")

    @property
    def round_trip_bps(self) -> float:
        return 2 * self.half_spread_bps + self.slippage_bps + self.fees_bps


@dataclass(frozen=True)
class ExitRule:
    take_profit_bps: float
    stop_bps: float = 5.0
    timeout_s: int = 300

    def __post_init__(self):
        if self.take_profit_bps <= 0 or self.stop_bps <= 0 or self.timeout_s <= 0:
            raise ValueError("exit thresholds must be positive")


@dataclass(frozen=True)
class Trade:
    entry_ts: int
    exit_ts: int
    direction: int
    entry_px: float
    exit_px: float
    exit_reason: str
    gross_bps: float
    net_bps: float
    signal_ts: int | None = None

    @property
    def win(self) -> bool:
        return self.net_bps > 0


@dataclass
class BacktestResult:
    """Trades of one test window plus their totals.

    Results built with :meth:`from_summary` carry totals only (``trades``
    is None); they exist so published per-fold rows can be pooled.
    """

    n: int
    n_wins: int
    total_net_bps: float
    trades: list[Trade] | None = None
    window: tuple[int, int] | None = None
    n_unfilled: int = 0
    total_gross_bps: float | None = None

    @property
    def win_rate(self) -> float:
        return self.n_wins / self.n if self.n else float("nan")

    @classmethod
    def from_trades(cls, trades: Sequence[Trade], window: tuple[int, int] | None = None,
                    n_unfilled: int = 0) -> "BacktestResult":
        trades = list(trades)
        return cls(n=len(trades), n_wins=sum(t.win for t in trades),
                   total_net_bps=float(sum(t.net_bps for t in trades)), trades=trades,
                   window=window, n_unfilled=n_unfilled,
                   total_gross_bps=float(sum(t.gross_bps for t in trades)))

    @classmethod
    def from_summary(cls, n: int, n_wins: int, total_net_bps: float,
                     window: tuple[int, int] | None = None) -> "BacktestResult":
        return cls(n=n, n_wins=n_wins, total_net_bps=float(total_net_bps), window=window)

    def trade_frame(self) -> pd.DataFrame:
        rows = self.trades or []
        return pd.DataFrame({c: [getattr(t, c) for t in rows] for c in TRADE_COLUMNS})


def _session_index(sessions: Sequence[Bars]) -> tuple[np.ndarray, np.ndarray]:
    starts = np.array([b.ts_s[0] for b in sessions], np.int64)
    ends = np.array([b.ts_s[-1] for b in sessions], np.int64)
    if len(starts) > 1 and np.any(starts[1:] <= ends[:-1]):
        raise ValueError("sessions must be time-ordered and non-overlapping")
    return starts, ends


def simulate_trade(bars: Bars, entry: int, direction: int, rule: ExitRule,
                   costs: CostModel = CostModel(), signal_ts: int | None = None) -> Trade | None:
    """Run one position entered at bar ``entry``; None if no bar follows it."""
    j, reason = _kernels.simulate_exit(bars.ts_s, bars.close, entry, float(direction),
                                       rule.stop_bps, rule.take_profit_bps, rule.timeout_s)
    if reason == _kernels.EXIT_NONE:
        return None
    entry_px, exit_px = float(bars.close[entry]), float(bars.close[j])
    gross = direction * np.log(exit_px / entry_px) * 1e4
    return Trade(int(bars.ts_s[entry]), int(bars.ts_s[j]), int(direction), entry_px, exit_px,
                 EXIT_REASONS[reason], float(gross), float(gross - costs.round_trip_bps), signal_ts)


def run_backtest(signals, sessions: Sequence[Bars], rule: ExitRule,
                 costs: CostModel = CostModel()) -> BacktestResult:
    """Execute ``signals`` (objects with ``ts_s`` and ``direction_hint``) over ``sessions``.

    Signals arriving while a position is open, or whose bar is the last or
    second-to-last of its session (nothing to exit into), produce no trade;
    the latter are counted in ``n_unfilled``.
    """
    sessions = [s for s in sessions if len(s)]
    if not sessions:
        return BacktestResult.from_trades([])
    starts, ends = _session_index(sessions)
    trades: list[Trade] = []
    busy_until = None
    unfilled = 0
    for sig in sorted(signals, key=lambda s: s.ts_s):
        if busy_until is not None and sig.ts_s <= busy_until:
            continue
        k = int(np.searchsorted(starts, sig.ts_s, side="right")) - 1
        if k < 0 or sig.ts_s > ends[k]:
            raise ValueError(f"signal at {sig.ts_s} lies outside every session")
        bars = sessions[k]
        i = int(np.searchsorted(bars.ts_s, sig.ts_s))
        if i >= len(bars) or bars.ts_s[i] != sig.ts_s:
            raise ValueError(f"signal at {sig.ts_s} does not fall on a bar")
        trade = simulate_trade(bars, i + 1, sig.direction_hint, rule, costs, signal_ts=int(sig.ts_s))
        if trade is None:
            unfilled += 1
            continue
        trades.append(trade)
        busy_until = trade.exit_ts
    window = (int(starts[0]), int(ends[-1]))
    return BacktestResult.from_trades(trades, window, unfilled)


def pool_folds(results: Sequence[BacktestResult]) -> BacktestResult:
    """Combine per-fold results; fold windows must not overlap."""
    results = list(results)
    if len(results) == 1:
        return results[0]
    windows = sorted(r.window for r in results if r.window is not None)
    for (_, e0), (s1, _) in zip(windows, windows[1:]):
        if s1 <= e0:
            raise ProtocolError("fold windows overlap")
    trades = None
    if all(r.trades is not None for r in results):
        trades = [t for r in results for t in r.trades]
    gross = None
    if all(r.total_gross_bps is not None for r in results):
        gross = float(sum(r.total_gross_bps for r in results))
    window = (windows[0][0], windows[-1][1]) if windows else None
    return BacktestResult(n=sum(r.n for r in results), n_wins=sum(r.n_wins for r in results),
                          total_net_bps=float(sum(r.total_net_bps for r in results)), trades=trades,
                          window=window, n_unfilled=sum(r.n_unfilled for r in results),
                          total_gross_bps=gross)


def write_trades(path, result: BacktestResult, provenance: dict | None = None):
    return write_frame(path, result.trade_frame(), provenance)


def entry_outcomes(bars: Bars, entries: np.ndarray, rule: ExitRule) -> tuple[np.ndarray, np.ndarray]:
    """Gross bps of independent long and short trades entered at each bar in ``entries``."""
    entries = np.asarray(entries, dtype=np.int64)
    args = (rule.stop_bps, rule.take_profit_bps, rule.timeout_s)
    long_ = _kernels.exit_gross_bps(bars.ts_s, bars.close, entries, 1.0, *args)
    short = _kernels.exit_gross_bps(bars.ts_s, bars.close, entries, -1.0, *args)
    return long_, short
