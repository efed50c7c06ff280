"""Synthetic tick market with noise traders and informed-trader bursts.

Noise traders produce a Poisson tick stream over a driftless log-price
random walk. An informed burst has two phases:

* an accumulation lead, where the informed trader's iceberg prints
  ``lead_prints_per_s`` blocks per second at a pinned price, the block size
  growing each second (volume sits at the top of its window, transitions
  collapse onto a single state);
* a drift phase, where the price trends at ``burst_drift_bps_per_s`` in the
  burst's sign with elevated activity;
* a decay phase of ``burst_decay_s`` seconds in which the transient part of
  the impact (``burst_decay_frac`` of the drift) fades away linearly.

Bursts arrive in clusters of ``burst_cluster_size`` back-to-back bursts
(an information episode). Each burst's sign is +1 or -1 with probability
1/2, independent of everything before it, so neither the entropy signature
nor the preceding price path says which way the next move goes. The burst
log records the ground truth, one row per burst.

Every day draws from its own stream seeded by ``(seed, day)``, so days can
be generated in any order or in parallel with identical output.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from ._csvio import read_frame, write_frame
from .ingest import NS_PER_S, SessionSpec, Ticks, write_ticks
from .markov import EntropySeries

BURST_COLUMNS = ["day", "start_s", "len_s", "sign"]


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    n_days: int = 36
    start_date: dt.date = dt.date(2025, 10, 1)
    session_s: int = 23_400
    base_price: float = 670.0
    tick_size: float = 0.01
    base_tick_rate: float = 3.0
    mean_trade_size: float = 100.0
    noise_vol_bps: float = 0.35
    burst_rate: float = 160.0
    burst_cluster_size: int = 8
    burst_lead_s: int = 20
    burst_len_s: int = 30
    burst_drift_bps_per_s: float = 1.3
    burst_noise_vol_bps: float = 0.3
    burst_decay_s: int = 20
    burst_decay_frac: float = 0.65
    burst_tick_mult: float = 2.0
    lead_prints_per_s: int = 8
    lead_block_size: int = 400
    lead_block_step: int = 40
    extended_s: int = 900
    extended_tick_mult: float = 0.05

    def __post_init__(self):
        if self.n_days < 1:
            raise ValueError("n_days must be at least 1")
        if not 0 < self.session_s <= 23_400:
            raise ValueError("session_s must be in (0, 23400]")
        for name in ("base_tick_rate", "mean_trade_size", "noise_vol_bps", "tick_size",
                     "base_price", "burst_tick_mult", "lead_prints_per_s", "lead_block_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.burst_rate < 0 or self.burst_drift_bps_per_s < 0 or self.burst_noise_vol_bps < 0:
            raise ValueError("burst parameters must be non-negative")
        if self.burst_decay_s < 0 or not 0 <= self.burst_decay_frac <= 1:
            raise ValueError("burst_decay_s must be non-negative and burst_decay_frac in [0, 1]")
        if self.burst_decay_frac > 0 and self.burst_decay_s == 0:
            raise ValueError("a decaying impact needs burst_decay_s > 0")
        if self.lead_block_step < 0:
            raise ValueError("lead_block_step must be non-negative")
        if self.burst_cluster_size < 1:
            raise ValueError("burst_cluster_size must be at least 1")
        if self.burst_lead_s < 0 or self.burst_len_s < 1:
            raise ValueError("burst_len_s must be positive and burst_lead_s non-negative")
        if self.cluster_s >= self.session_s:
            raise ValueError("bursts must be shorter than the session")
        if self.extended_s < 0 or self.extended_tick_mult < 0:
            raise ValueError("extended-hours parameters must be non-negative")
        inv = 1.0 / self.tick_size
        if abs(inv - round(inv)) > 1e-9:
            raise ValueError("tick_size must divide 1")

    @property
    def footprint_s(self) -> int:
        return self.burst_lead_s + self.burst_len_s + self.burst_decay_s

    @property
    def cluster_s(self) -> int:
        return self.burst_cluster_size * self.footprint_s

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["start_date"] = self.start_date.isoformat()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        if isinstance(data.get("start_date"), str):
            data["start_date"] = dt.date.fromisoformat(data["start_date"])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Burst:
    day: int
    start_s: int
    len_s: int
    sign: int


@dataclass
class SyntheticDay:
    day: int
    session: SessionSpec
    ticks: Ticks
    n_pre: int
    n_in_session: int
    n_post: int
    log_price_bps: np.ndarray
    regime: np.ndarray


@dataclass
class SyntheticMarket:
    config: SynthConfig
    days: list[SyntheticDay]
    bursts: list[Burst]

    def burst_frame(self) -> pd.DataFrame:
        return burst_frame(self.bursts)


REGIME_NOISE = 0
REGIME_LEAD = 1
REGIME_DRIFT = 2
REGIME_DECAY = 3


def trading_days(start: dt.date, n: int) -> list[dt.date]:
    """``n`` consecutive weekdays from ``start`` (no holiday calendar)."""
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def _place_bursts(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    lam = cfg.burst_rate / cfg.burst_cluster_size
    n = rng.poisson(lam) if lam > 0 else 0
    n = min(n, cfg.session_s // cfg.cluster_s)
    free = cfg.session_s - n * cfg.cluster_s
    # uniform placement of n non-overlapping clusters
    gaps = np.sort(rng.integers(0, free + 1, size=n))
    cluster_starts = gaps + np.arange(n) * cfg.cluster_s
    starts = (cluster_starts[:, None]
              + np.arange(cfg.burst_cluster_size)[None, :] * cfg.footprint_s).ravel()
    signs = np.where(rng.random(starts.size) < 0.5, -1, 1)
    return starts.astype(np.int64), signs.astype(np.int64)


def generate_day(cfg: SynthConfig, day: int, date: dt.date | None = None) -> tuple[SyntheticDay, list[Burst]]:
    rng = np.random.default_rng([cfg.seed, day])
    if date is None:
        date = trading_days(cfg.start_date, day + 1)[day]
    regular = SessionSpec.regular(date)
    session = SessionSpec(date, regular.open_s, regular.open_s + cfg.session_s)

    ext = cfg.extended_s
    n_sec = cfg.session_s + 2 * ext
    starts, signs = _place_bursts(rng, cfg)

    regime = np.zeros(n_sec, np.int8)
    drift = np.zeros(n_sec)
    lead_k = np.zeros(n_sec, np.int64)
    for s0, sg in zip(starts.tolist(), signs.tolist()):
        a = ext + s0
        regime[a:a + cfg.burst_lead_s] = REGIME_LEAD
        lead_k[a:a + cfg.burst_lead_s] = np.arange(cfg.burst_lead_s)
        b = a + cfg.burst_lead_s
        regime[b:b + cfg.burst_len_s] = REGIME_DRIFT
        drift[b:b + cfg.burst_len_s] = sg * cfg.burst_drift_bps_per_s
        c = b + cfg.burst_len_s
        if cfg.burst_decay_s:
            regime[c:c + cfg.burst_decay_s] = REGIME_DECAY
            drift[c:c + cfg.burst_decay_s] = (-sg * cfg.burst_decay_frac * cfg.burst_drift_bps_per_s
                                              * cfg.burst_len_s / cfg.burst_decay_s)

    vol = np.where(regime == REGIME_DRIFT, cfg.burst_noise_vol_bps, cfg.noise_vol_bps)
    vol[regime == REGIME_LEAD] = 0.0
    steps = drift + vol * rng.standard_normal(n_sec)
    x = np.cumsum(steps)
    x_prev = np.r_[0.0, x[:-1]]
    p0 = cfg.base_price * np.exp(0.005 * rng.standard_normal())

    rate = np.full(n_sec, cfg.base_tick_rate)
    rate[regime == REGIME_DRIFT] *= cfg.burst_tick_mult
    rate[:ext] *= cfg.extended_tick_mult
    rate[ext + cfg.session_s:] *= cfg.extended_tick_mult
    counts = rng.poisson(rate)
    counts[regime == REGIME_LEAD] = cfg.lead_prints_per_s

    sec = np.repeat(np.arange(n_sec), counts)
    u = rng.random(sec.size)
    order = np.argsort(sec + u, kind="stable")
    sec, u = sec[order], u[order]
    # pinned seconds print exactly at the prior close
    frac = np.where(regime[sec] == REGIME_LEAD, 1.0, u)
    xt = x_prev[sec] + (x[sec] - x_prev[sec]) * frac
    inv_tick = int(round(1.0 / cfg.tick_size))
    ticks_int = np.maximum(np.rint(p0 * np.exp(xt / 1e4) * inv_tick), 1)
    price = ticks_int / inv_tick

    size = rng.geometric(1.0 / cfg.mean_trade_size, size=sec.size).astype(np.int64)
    lead = regime[sec] == REGIME_LEAD
    size[lead] = cfg.lead_block_size + cfg.lead_block_step * lead_k[sec[lead]]

    base_ns = (session.open_s - ext) * NS_PER_S
    ts_ns = base_ns + sec.astype(np.int64) * NS_PER_S + np.floor(u * NS_PER_S).astype(np.int64)
    ts_ns = np.minimum(ts_ns, base_ns + (sec.astype(np.int64) + 1) * NS_PER_S - 1)

    n_pre = int(np.count_nonzero(sec < ext))
    n_post = int(np.count_nonzero(sec >= ext + cfg.session_s))
    bursts = [Burst(day, int(session.open_s + s0), cfg.footprint_s, int(sg))
              for s0, sg in zip(starts.tolist(), signs.tolist())]
    out = SyntheticDay(day, session, Ticks(ts_ns, price, size), n_pre,
                       int(sec.size) - n_pre - n_post, n_post,
                       x[ext:ext + cfg.session_s] + 1e4 * np.log(p0), regime[ext:ext + cfg.session_s])
    return out, bursts


def generate_market(cfg: SynthConfig) -> SyntheticMarket:
    """Generate ``cfg.n_days`` days of ticks plus the ground-truth burst log."""
    dates = trading_days(cfg.start_date, cfg.n_days)
    days, bursts = [], []
    for i, date in enumerate(dates):
        d, b = generate_day(cfg, i, date)
        days.append(d)
        bursts.extend(b)
    return SyntheticMarket(cfg, days, bursts)


def burst_frame(bursts: list[Burst]) -> pd.DataFrame:
    return pd.DataFrame({
        "day": np.array([b.day for b in bursts], np.int64),
        "start_s": np.array([b.start_s for b in bursts], np.int64),
        "len_s": np.array([b.len_s for b in bursts], np.int64),
        "sign": np.array([b.sign for b in bursts], np.int64),
    })


def tick_filename(session: SessionSpec) -> str:
    return f"ticks_{session.date.isoformat()}.csv"


def write_market(market: SyntheticMarket, outdir: str | Path, provenance: dict | None = None) -> list[Path]:
    """Write one tick CSV per day, ``bursts.csv`` and ``sessions.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [write_ticks(outdir / tick_filename(d.session), d.ticks, provenance) for d in market.days]
    write_frame(outdir / "bursts.csv", market.burst_frame(), provenance)
    sessions = [{"date": d.session.date.isoformat(), "open_s": d.session.open_s,
                 "close_s": d.session.close_s, "file": tick_filename(d.session),
                 "n_pre": d.n_pre, "n_in_session": d.n_in_session, "n_post": d.n_post}
                for d in market.days]
    with open(outdir / "sessions.json", "w", encoding="utf-8") as fh:
        json.dump({"provenance": provenance, "sessions": sessions}, fh, indent=2, sort_keys=True)
    return paths


def read_bursts(path: str | Path) -> list[Burst]:
    frame = read_frame(path, BURST_COLUMNS, {c: np.int64 for c in BURST_COLUMNS})
    return [Burst(int(r.day), int(r.start_s), int(r.len_s), int(r.sign)) for r in frame.itertuples()]


def burst_mask(ts_s: np.ndarray, bursts: list[Burst]) -> np.ndarray:
    """True where ``ts_s`` falls inside a burst footprint ``[start, start + len)``."""
    ts_s = np.asarray(ts_s)
    mask = np.zeros(ts_s.shape, bool)
    if not bursts:
        return mask
    starts = np.array(sorted(b.start_s for b in bursts))
    ends = np.array([b.start_s + b.len_s for b in sorted(bursts, key=lambda b: b.start_s)])
    k = np.searchsorted(starts, ts_s, side="right") - 1
    valid = k >= 0
    mask[valid] = ts_s[valid] < ends[k[valid]]
    return mask


def oracle_report(series: EntropySeries | list[EntropySeries], bursts: list[Burst],
                  quantile: float = 0.05) -> dict:
    """Compare entropy inside vs outside the ground-truth bursts.

    ``precision`` is the share of sub-``quantile`` entropy points that fall
    inside a burst; ``base_rate`` is the share of all defined points inside
    bursts, which is what precision collapses to without information.
    """
    if not isinstance(series, EntropySeries):
        series = EntropySeries.concat(series)
    ok = series.defined
    ts, h = series.ts_s[ok], series.h[ok]
    inside = burst_mask(ts, bursts)
    report = {"n_points": int(ok.sum()), "n_bursts": len(bursts), "n_inside": int(inside.sum())}
    if len(h) == 0 or not inside.any() or inside.all():
        report.update(mean_h_inside=None, mean_h_outside=None, precision=None, base_rate=None,
                      lift=None, split="undefined")
        return report
    cut = float(np.percentile(h, 100 * quantile))
    low = h < cut
    base = float(inside.mean())
    precision = float(inside[low].mean()) if low.any() else None
    report.update(mean_h_inside=float(h[inside].mean()), mean_h_outside=float(h[~inside].mean()),
                  low_cut=cut, n_low=int(low.sum()), precision=precision, base_rate=base,
                  lift=None if precision is None else precision / base, split="defined")
    return report
