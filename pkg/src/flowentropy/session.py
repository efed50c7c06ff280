"""Per-session bundle of bars and bar-aligned entropy, plus return helpers."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .ingest import Bars
from .markov import EntropySeries, entropy_series


def trailing_return_bps(bars: Bars, horizon_s: int = 300) -> np.ndarray:
    """``log(P_t / P_ref) * 1e4`` with P_ref the last bar at or before ``t - horizon_s``.

    NaN where no such bar exists in the session.
    """
    ts = bars.ts_s
    ref = np.searchsorted(ts, ts - horizon_s, side="right") - 1
    out = np.full(len(ts), np.nan)
    ok = ref >= 0
    out[ok] = np.log(bars.close[ok] / bars.close[ref[ok]]) * 1e4
    return out


def forward_return_bps(bars: Bars, horizon_s: int = 300) -> np.ndarray:
    """``log(P_ref / P_t) * 1e4`` with P_ref the last bar at or before ``t + horizon_s``.

    NaN unless the session extends to ``t + horizon_s`` (some bar at or after it).
    """
    ts = bars.ts_s
    out = np.full(len(ts), np.nan)
    if len(ts) == 0:
        return out
    ref = np.searchsorted(ts, ts + horizon_s, side="right") - 1
    ok = ts + horizon_s <= ts[-1]
    out[ok] = np.log(bars.close[ref[ok]] / bars.close[ok]) * 1e4
    return out


@dataclass
class SessionData:
    """Bars of one session with entropy aligned bar-by-bar.

    ``h[i]`` is the entropy at bar ``i`` (NaN for the first bar, which has
    no state, and for warm-up points).
    """

    date: dt.date
    bars: Bars
    entropy: EntropySeries

    @property
    def h(self) -> np.ndarray:
        out = np.full(len(self.bars), np.nan)
        if len(self.entropy):
            pos = np.searchsorted(self.bars.ts_s, self.entropy.ts_s)
            out[pos] = self.entropy.h
        return out

    @property
    def start_s(self) -> int:
        return int(self.bars.ts_s[0])

    @property
    def end_s(self) -> int:
        return int(self.bars.ts_s[-1])

    def truncate(self, t: int) -> "SessionData":
        """Drop everything stamped after ``t``."""
        nb = int(np.searchsorted(self.bars.ts_s, t, side="right"))
        ne = int(np.searchsorted(self.entropy.ts_s, t, side="right"))
        e = self.entropy
        return SessionData(self.date, self.bars[:nb],
                           EntropySeries(e.ts_s[:ne], e.h[:ne], e.n_transitions[:ne], e.converged[:ne]))


def build_session(bars: Bars, date: dt.date, window_s: int = 120,
                  min_transitions: int = 30) -> SessionData:
    return SessionData(date, bars, entropy_series(bars, window_s, min_transitions))
