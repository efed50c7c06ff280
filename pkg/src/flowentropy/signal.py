"""Threshold calibration on training sessions and entry-signal generation."""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from ._csvio import write_frame
from .backtest import CostModel, ExitRule, ProtocolError, run_backtest
from .session import SessionData, trailing_return_bps

logger = logging.getLogger(__name__)

TAKE_PROFIT_GRID = (10.0, 15.0, 20.0, 25.0, 30.0)
MIN_TRAINING_POINTS = 1_000
SIGNAL_COLUMNS = ["ts_s", "h", "trailing_ret_bps", "volume", "direction_hint"]


class InsufficientDataError(Exception):
    pass


@dataclass(frozen=True)
class SignalConfig:
    entropy_pct: float = 0.05
    volume_pct: float = 0.95
    ret_min_bps: float = 5.0
    ret_max_bps: float = 20.0
    trailing_s: int = 300
    band: str = "absolute"
    take_profit_grid: tuple[float, ...] = TAKE_PROFIT_GRID
    stop_bps: float = 5.0
    timeout_s: int = 300

    def __post_init__(self):
        if not 0 < self.entropy_pct < 1 or not 0 < self.volume_pct < 1:
            raise ValueError("percentiles must lie strictly between 0 and 1")
        if not self.ret_min_bps < self.ret_max_bps:
            raise ValueError("ret_min_bps must be below ret_max_bps")
        if self.band not in ("absolute", "signed"):
            raise ValueError("band must be 'absolute' or 'signed'")
        if not self.take_profit_grid or min(self.take_profit_grid) <= 0:
            raise ValueError("take-profit grid must hold positive values")
        if self.stop_bps <= 0 or self.timeout_s <= 0:
            raise ValueError("stop_bps and timeout_s must be positive")


@dataclass(frozen=True)
class Thresholds:
    h_lo: float
    vol_hi: float
    take_profit_bps: float
    ret_min_bps: float = 5.0
    ret_max_bps: float = 20.0
    train_end_s: int | None = None
    train_pnl_bps: dict | None = None

    def __post_init__(self):
        if not 0 <= self.h_lo <= 1:
            raise ValueError("h_lo must lie in [0, 1]")
        if not self.ret_min_bps < self.ret_max_bps or self.take_profit_bps <= 0:
            raise ValueError("inconsistent thresholds")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Thresholds":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class SignalEvent:
    ts_s: int
    h: float
    trailing_ret_bps: float
    volume: int
    direction_hint: int


def _band_ok(ret: np.ndarray, lo: float, hi: float, band: str) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        if band == "absolute":
            a = np.abs(ret)
            return (a >= lo) & (a <= hi)
        return (ret >= lo) & (ret <= hi)


def signal_mask(session: SessionData, th: Thresholds, band: str = "absolute",
                trailing_s: int = 300) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean mask of signal bars plus the bar-aligned entropy and trailing return."""
    h = session.h
    ret = trailing_return_bps(session.bars, trailing_s)
    with np.errstate(invalid="ignore"):
        mask = (h < th.h_lo) & (session.bars.volume > th.vol_hi)
    mask &= _band_ok(ret, th.ret_min_bps, th.ret_max_bps, band) & (np.nan_to_num(ret) != 0)
    return mask, h, ret


def generate_signals(sessions: Sequence[SessionData], th: Thresholds, band: str = "absolute",
                     trailing_s: int = 300) -> list[SignalEvent]:
    """Emit an event at every bar meeting all three entry conditions.

    Entropy defined and below ``h_lo``, bar volume above ``vol_hi``, and the
    trailing return inside the band (on its absolute value by default). The
    direction hint is the sign of the trailing return; a zero return emits
    nothing.
    """
    sessions = [s for s in sessions if len(s.bars)]
    if th.train_end_s is not None and sessions and min(s.start_s for s in sessions) <= th.train_end_s:
        raise ProtocolError("thresholds were calibrated on data overlapping the signal window")
    events: list[SignalEvent] = []
    for s in sessions:
        mask, h, ret = signal_mask(s, th, band, trailing_s)
        for i in np.flatnonzero(mask):
            events.append(SignalEvent(int(s.bars.ts_s[i]), float(h[i]), float(ret[i]),
                                      int(s.bars.volume[i]), int(np.sign(ret[i]))))
    return events


def calibrate(train: Sequence[SessionData], config: SignalConfig = SignalConfig(),
              costs: CostModel = CostModel()) -> Thresholds:
    """Fit entropy and volume cut-offs and pick the take-profit on training data.

    Percentiles use linear interpolation over bars with defined entropy.
    The take-profit is the grid value with the highest net training PnL,
    the smallest one on ties.
    """
    train = [s for s in train if len(s.bars)]
    hs, vols = [], []
    for s in train:
        h = s.h
        ok = ~np.isnan(h)
        hs.append(h[ok])
        vols.append(s.bars.volume[ok])
    h_all = np.concatenate(hs) if hs else np.empty(0)
    v_all = np.concatenate(vols) if vols else np.empty(0)
    if len(h_all) < MIN_TRAINING_POINTS:
        raise InsufficientDataError(
            f"{len(h_all)} defined entropy points in training, need {MIN_TRAINING_POINTS}")
    h_lo = float(np.percentile(h_all, 100 * config.entropy_pct))
    vol_hi = float(np.percentile(v_all, 100 * config.volume_pct))
    if np.all(v_all == v_all[0]):
        warnings.warn("all training volumes are equal; the volume condition can never fire",
                      RuntimeWarning, stacklevel=2)
    train_end = max(s.end_s for s in train)

    base = Thresholds(h_lo, vol_hi, config.take_profit_grid[0], config.ret_min_bps,
                      config.ret_max_bps)
    signals = generate_signals(train, base, config.band, config.trailing_s)
    bars = [s.bars for s in train]
    pnl = {}
    for tp in sorted(config.take_profit_grid):
        rule = ExitRule(tp, config.stop_bps, config.timeout_s)
        pnl[tp] = run_backtest(signals, bars, rule, costs).total_net_bps
    best = max(pnl, key=lambda tp: (pnl[tp], -tp))
    logger.debug("calibrated h_lo=%.4f vol_hi=%.1f take_profit=%g", h_lo, vol_hi, best)
    return Thresholds(h_lo, vol_hi, float(best), config.ret_min_bps, config.ret_max_bps,
                      int(train_end), {str(k): float(v) for k, v in pnl.items()})


def signal_frame(events: Sequence[SignalEvent]) -> pd.DataFrame:
    return pd.DataFrame({c: [getattr(e, c) for e in events] for c in SIGNAL_COLUMNS})


def write_signals(path, events: Sequence[SignalEvent], provenance: dict | None = None):
    return write_frame(path, signal_frame(events), provenance)
