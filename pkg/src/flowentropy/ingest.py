"""Tick parsing, session filtering and per-second bar aggregation.

Ticks and bars are held column-wise in numpy arrays; iterating a
:class:`Ticks` or :class:`Bars` container yields the record types.
Timestamps stay integral throughout (nanoseconds for ticks, seconds for
bars) so window arithmetic downstream is exact.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple
from zoneinfo import ZoneInfo

import numpy as np
import pandas as pd

from ._csvio import leading_comment_lines, read_frame, write_frame

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
MAX_SESSION_S = 23_400
TICK_COLUMNS = ["ts_ns", "price", "size"]
BAR_COLUMNS = ["ts_s", "close", "volume"]
NEW_YORK = ZoneInfo("America/New_York")


class TickFormatError(Exception):
    """Fatal problem with a tick file (unreadable, bad header, corrupt clock)."""


class TickRecord(NamedTuple):
    ts_ns: int
    price: float
    size: int


class SecondBar(NamedTuple):
    ts_s: int
    close: float
    volume: int


@dataclass(frozen=True)
class RowError:
    line: int
    message: str


@dataclass
class ParseReport:
    path: str
    n_rows: int = 0
    errors: list[RowError] = field(default_factory=list)

    @property
    def n_errors(self) -> int:
        return len(self.errors)


@dataclass
class Ticks:
    ts_ns: np.ndarray
    price: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        self.ts_ns = np.asarray(self.ts_ns, dtype=np.int64)
        self.price = np.asarray(self.price, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.int64)

    @classmethod
    def empty(cls) -> "Ticks":
        return cls(np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64))

    @classmethod
    def from_records(cls, records) -> "Ticks":
        records = list(records)
        if not records:
            return cls.empty()
        ts, px, sz = zip(*records)
        return cls(np.array(ts, np.int64), np.array(px), np.array(sz, np.int64))

    def __len__(self) -> int:
        return len(self.ts_ns)

    def __iter__(self) -> Iterator[TickRecord]:
        for t, p, s in zip(self.ts_ns.tolist(), self.price.tolist(), self.size.tolist()):
            yield TickRecord(t, p, s)

    def __getitem__(self, key) -> "Ticks":
        return Ticks(self.ts_ns[key], self.price[key], self.size[key])


@dataclass
class Bars:
    ts_s: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        self.ts_s = np.asarray(self.ts_s, dtype=np.int64)
        self.close = np.asarray(self.close, dtype=np.float64)
        self.volume = np.asarray(self.volume, dtype=np.int64)

    @classmethod
    def from_records(cls, records) -> "Bars":
        records = list(records)
        if not records:
            return cls(np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64))
        ts, px, v = zip(*records)
        return cls(ts, px, v)

    def __len__(self) -> int:
        return len(self.ts_s)

    def __iter__(self) -> Iterator[SecondBar]:
        for t, c, v in zip(self.ts_s.tolist(), self.close.tolist(), self.volume.tolist()):
            yield SecondBar(t, c, v)

    def __getitem__(self, key) -> "Bars":
        return Bars(self.ts_s[key], self.close[key], self.volume[key])


@dataclass(frozen=True)
class SessionSpec:
    """One trading session: ``open_s <= ts < close_s`` in epoch seconds."""

    date: dt.date
    open_s: int
    close_s: int

    def __post_init__(self):
        if not self.open_s < self.close_s:
            raise ValueError("session open must precede close")
        if self.close_s - self.open_s > MAX_SESSION_S:
            raise ValueError(f"session longer than {MAX_SESSION_S} s")

    @classmethod
    def regular(cls, date: dt.date, open_time: dt.time = dt.time(9, 30),
                close_time: dt.time = dt.time(16, 0), tz: ZoneInfo = NEW_YORK) -> "SessionSpec":
        open_s = int(dt.datetime.combine(date, open_time, tzinfo=tz).timestamp())
        close_s = int(dt.datetime.combine(date, close_time, tzinfo=tz).timestamp())
        return cls(date, open_s, close_s)

    @property
    def length_s(self) -> int:
        return self.close_s - self.open_s


def _parse_slow(path: Path, report: ParseReport):
    """Line-by-line fallback that records malformed rows with line numbers."""
    ts, px, sz = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                if line.split(",") != TICK_COLUMNS:
                    raise TickFormatError(f"{path}: bad header {line!r}")
                header_seen = True
                continue
            report.n_rows += 1
            parts = line.split(",")
            try:
                if len(parts) != 3:
                    raise ValueError(f"expected 3 fields, got {len(parts)}")
                t, p, s = int(parts[0]), float(parts[1]), int(parts[2])
            except ValueError as exc:
                report.errors.append(RowError(lineno, f"malformed row: {exc}"))
                continue
            if not p > 0 or s < 1:
                report.errors.append(RowError(lineno, f"non-positive price or size: {line!r}"))
                continue
            ts.append(t)
            px.append(p)
            sz.append(s)
    return Ticks(np.array(ts, np.int64), np.array(px), np.array(sz, np.int64))


def parse_ticks(path: str | Path, fmt: str = "csv") -> tuple[Ticks, ParseReport]:
    """Parse a tick CSV (``ts_ns,price,size``) in file order.

    Rows with a non-positive price or size, or that fail to parse, are
    excluded and listed in the returned report with their line numbers.
    A timestamp more than one second behind the running maximum is treated
    as a corrupt feed and raises :class:`TickFormatError`.
    """
    if fmt != "csv":
        raise ValueError(f"unsupported tick format {fmt!r}")
    path = Path(path)
    try:
        if path.stat().st_size == 0:
            return Ticks.empty(), ParseReport(str(path))
        skip = leading_comment_lines(path)
    except OSError as exc:
        raise TickFormatError(f"cannot read {path}: {exc}") from exc

    report = ParseReport(str(path))
    try:
        frame = pd.read_csv(path, skiprows=skip, dtype={"ts_ns": np.int64, "price": np.float64,
                                                         "size": np.int64})
        if list(frame.columns) != TICK_COLUMNS:
            raise TickFormatError(f"{path}: bad header {','.join(map(str, frame.columns))!r}")
    except pd.errors.EmptyDataError:
        return Ticks.empty(), report
    except (ValueError, pd.errors.ParserError):
        ticks = _parse_slow(path, report)
    else:
        report.n_rows = len(frame)
        ticks = Ticks(frame["ts_ns"].to_numpy(), frame["price"].to_numpy(), frame["size"].to_numpy())
        bad = ~(ticks.price > 0) | (ticks.size < 1)
        if bad.any():
            first_data_line = skip + 2
            for i in np.flatnonzero(bad):
                report.errors.append(RowError(int(i) + first_data_line,
                                              "non-positive price or size"))
            ticks = ticks[~bad]

    if len(ticks) > 1:
        running = np.maximum.accumulate(ticks.ts_ns)
        lag = running[:-1] - ticks.ts_ns[1:]
        worst = int(np.argmax(lag))
        if lag[worst] > NS_PER_S:
            raise TickFormatError(
                f"{path}: timestamp regression of {lag[worst] / NS_PER_S:.3f} s at record {worst + 1}")
    if report.n_errors:
        logger.warning("%s: %d malformed rows excluded", path, report.n_errors)
    return ticks, report


def write_ticks(path: str | Path, ticks: Ticks, provenance: dict | None = None) -> Path:
    frame = pd.DataFrame({"ts_ns": ticks.ts_ns, "price": ticks.price, "size": ticks.size})
    return write_frame(path, frame, provenance, float_format="%.4f")


def filter_session(ticks: Ticks, session: SessionSpec) -> tuple[Ticks, int]:
    """Keep ticks with ``open_s <= ts < close_s``; return them with the dropped count."""
    lo = session.open_s * NS_PER_S
    hi = session.close_s * NS_PER_S
    keep = (ticks.ts_ns >= lo) & (ticks.ts_ns < hi)
    return ticks[keep], int(len(ticks) - keep.sum())


def aggregate_bars(ticks: Ticks, session: SessionSpec | None = None) -> Bars:
    """Collapse ticks into one bar per second that saw at least one trade.

    The close is the last tick of the second by timestamp, with file order
    breaking exact ties; volume is the summed size. Empty seconds emit no bar.
    """
    if len(ticks) == 0:
        return Bars.from_records([])
    order = np.argsort(ticks.ts_ns, kind="stable")
    ts_ns = ticks.ts_ns[order]
    if session is not None and (ts_ns[0] < session.open_s * NS_PER_S
                                or ts_ns[-1] >= session.close_s * NS_PER_S):
        raise ValueError("ticks fall outside the session; call filter_session first")
    sec = ts_ns // NS_PER_S
    starts = np.flatnonzero(np.r_[True, sec[1:] != sec[:-1]])
    ends = np.r_[starts[1:], len(sec)] - 1
    return Bars(sec[starts], ticks.price[order][ends], np.add.reduceat(ticks.size[order], starts))


def write_bars(path: str | Path, bars: Bars, provenance: dict | None = None) -> Path:
    frame = pd.DataFrame({"ts_s": bars.ts_s, "close": bars.close, "volume": bars.volume})
    return write_frame(path, frame, provenance)


def read_bars(path: str | Path) -> Bars:
    frame = read_frame(path, BAR_COLUMNS, {"ts_s": np.int64, "close": np.float64, "volume": np.int64})
    return Bars(frame["ts_s"].to_numpy(), frame["close"].to_numpy(), frame["volume"].to_numpy())


def load_session(path: str | Path, session: SessionSpec) -> tuple[Bars, dict]:
    """Parse, filter and aggregate one day's tick file."""
    ticks, report = parse_ticks(path)
    kept, dropped = filter_session(ticks, session)
    bars = aggregate_bars(kept, session)
    stats = {"rows": report.n_rows, "row_errors": report.n_errors, "kept": len(kept),
             "dropped_out_of_session": dropped, "bars": len(bars)}
    return bars, stats
