"""Walk-forward orchestration, hypothesis tests, placebos, attribution and sensitivity.

Everything random here is seeded per trial with ``default_rng([seed, trial])``
so results do not depend on how trials are split across workers.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .backtest import (BacktestResult, CostModel, ExitRule, ProtocolError, entry_outcomes,
                       pool_folds, run_backtest)
from .session import SessionData, forward_return_bps
from .signal import InsufficientDataError, SignalConfig, Thresholds, calibrate, generate_signals

logger = logging.getLogger(__name__)

N_TESTS = 14
DEGENERATE_SD = 1e-12
SENSITIVITY_PARAMS = ("entropy_pct", "volume_pct", "stop_bps", "timeout_s")
SENSITIVITY_LEVELS = (0.5, 0.75, 1.0, 1.25, 1.5)


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldSpec:
    train_days: int = 10
    test_days: int = 5
    folds: tuple = ()

    def __post_init__(self):
        if self.train_days < 1 or self.test_days < 1:
            raise ValueError("train_days and test_days must be positive")
        prev_end = None
        for (tr0, tr1), (te0, te1) in self.folds:
            if not tr0 <= tr1 < te0 <= te1:
                raise ProtocolError(f"fold train {tr0}..{tr1} does not end before test {te0}..{te1}")
            if prev_end is not None and te0 <= prev_end:
                raise ProtocolError("test ranges overlap")
            prev_end = te1

    @property
    def n_folds(self) -> int:
        return len(self.folds)


def achievable_folds(n_days: int, train_days: int = 10, test_days: int = 5) -> int:
    return max(0, (n_days - train_days) // test_days)


def make_folds(dates: Sequence[dt.date], train_days: int = 10, test_days: int = 5) -> FoldSpec:
    """Rolling folds: train on ``train_days`` sessions, test on the next ``test_days``.

    Fold k trains on sessions ``[k*test, k*test + train)``; test windows tile
    the data after the first training window without overlapping.
    """
    dates = sorted(dates)
    if len(set(dates)) != len(dates):
        raise ValueError("duplicate session dates")
    n = achievable_folds(len(dates), train_days, test_days)
    if n == 0:
        raise InsufficientDataError(
            f"{len(dates)} trading days give 0 complete folds; need at least "
            f"{train_days + test_days} for one {train_days}/{test_days} fold")
    folds = []
    for k in range(n):
        a = k * test_days
        b = a + train_days
        folds.append(((dates[a], dates[b - 1]), (dates[b], dates[b + test_days - 1])))
    return FoldSpec(train_days, test_days, tuple(folds))


def _select(sessions: Sequence[SessionData], lo: dt.date, hi: dt.date) -> list[SessionData]:
    return [s for s in sessions if lo <= s.date <= hi]


def audit_fold(train: Sequence[SessionData], test: Sequence[SessionData]) -> None:
    """Hard check that every training bar precedes every test bar."""
    tr = [s.end_s for s in train if len(s.bars)]
    te = [s.start_s for s in test if len(s.bars)]
    if tr and te and not max(tr) < min(te):
        raise ProtocolError(f"train data ends at {max(tr)} but test data starts at {min(te)}")


# ---------------------------------------------------------------- tests

@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float


def welch_t(a, b) -> WelchResult:
    """Two-sample t with unequal variances and Welch-Satterthwaite df."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0:
        if ma == mb:
            return WelchResult(0.0, float(len(a) + len(b) - 2), 1.0)
        t = math.copysign(math.inf, ma - mb)
        return WelchResult(t, float(len(a) + len(b) - 2), 0.0)
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    p = float(min(1.0, 2 * stats.t.sf(abs(t), df)))
    return WelchResult(float(t), float(df), p)


@dataclass(frozen=True)
class BinomialResult:
    k: int
    n: int
    z: float
    p: float
    p_corrected: float
    p_exact: float


def binomial_direction(k: int, n: int) -> BinomialResult:
    """Normal-approximation test of ``k`` hits in ``n`` against one half.

    ``z = (k - n/2) / sqrt(n/4)`` without continuity correction; ``p`` is its
    two-sided normal tail. The continuity-corrected and exact binomial
    two-sided p-values are reported alongside.
    """
    if n < 1 or not 0 <= k <= n:
        raise ValueError("need n >= 1 and 0 <= k <= n")
    half = n / 2
    sd = math.sqrt(n / 4)
    z = (k - half) / sd
    p = float(min(1.0, 2 * stats.norm.sf(abs(z))))
    zc = max(abs(k - half) - 0.5, 0.0) / sd
    p_cc = float(min(1.0, 2 * stats.norm.sf(zc)))
    p_exact = float(stats.binomtest(k, n, 0.5).pvalue)
    return BinomialResult(int(k), int(n), float(z), p, p_cc, p_exact)


def placebo_z(observed: float, null_mean: float, null_sd: float) -> tuple[float, bool]:
    """(z, flagged); z is NaN and flagged when the null is degenerate."""
    if not np.isfinite(observed) or not np.isfinite(null_mean) or not null_sd >= DEGENERATE_SD:
        return float("nan"), True
    return float((observed - null_mean) / null_sd), False


# ---------------------------------------------------------------- magnitude

def aligned_magnitude(sessions: Sequence[SessionData], horizon_s: int = 300):
    """Concatenated (ts, entropy, |forward return|) over points where both exist."""
    ts, hs, rs = [], [], []
    for s in sessions:
        if not len(s.bars):
            continue
        h = s.h
        r = forward_return_bps(s.bars, horizon_s)
        ok = ~np.isnan(h) & ~np.isnan(r)
        ts.append(s.bars.ts_s[ok])
        hs.append(h[ok])
        rs.append(np.abs(r[ok]))
    if not ts:
        return np.empty(0, np.int64), np.empty(0), np.empty(0)
    return np.concatenate(ts), np.concatenate(hs), np.concatenate(rs)


def quintile_labels(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entropy quintile 1..5 per point (Q1 lowest) and the four cut points."""
    edges = np.percentile(h, [20, 40, 60, 80]) if len(h) else np.full(4, np.nan)
    return np.digitize(h, edges, right=True) + 1, edges


def _ratio(a: np.ndarray, q1: np.ndarray, q5: np.ndarray) -> float:
    n1, n5 = q1.sum(), q5.sum()
    if n1 == 0 or n5 == 0:
        return float("nan")
    m5 = a[q5].mean()
    return float(a[q1].mean() / m5) if m5 > 0 else float("nan")


@dataclass
class MagnitudeStats:
    n: int
    edges: np.ndarray
    quintile_n: np.ndarray
    quintile_mean: np.ndarray
    low_cut: float
    low_n: int
    low_mean: float
    mean: float
    ratio: float
    low_factor: float
    welch: WelchResult | None
    block_se: float | None
    flags: list[str] = field(default_factory=list)

    def table(self) -> pd.DataFrame:
        lo = np.r_[-np.inf, self.edges]
        hi = np.r_[self.edges, np.inf]
        return pd.DataFrame({"quintile": np.arange(1, 6), "h_lo": lo, "h_hi": hi,
                             "n": self.quintile_n, "mean_abs_ret_bps": self.quintile_mean})

    def to_dict(self) -> dict:
        return {"n": self.n, "edges": self.edges.tolist(), "quintile_n": self.quintile_n.tolist(),
                "quintile_mean": [None if np.isnan(x) else float(x) for x in self.quintile_mean],
                "low_cut": self.low_cut, "low_n": self.low_n, "low_mean": _num(self.low_mean),
                "mean": _num(self.mean), "ratio": _num(self.ratio), "low_factor": _num(self.low_factor),
                "welch": None if self.welch is None else dataclasses.asdict(self.welch),
                "block_se": self.block_se, "flags": self.flags}


def _num(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _block_bootstrap_se(h: np.ndarray, a: np.ndarray, block: int, reps: int, seed: int) -> float:
    n = len(h)
    block = max(1, min(block, n))
    n_blocks = -(-n // block)
    out = np.empty(reps)
    for r in range(reps):
        rng = np.random.default_rng([seed, r])
        starts = rng.integers(0, n - block + 1, size=n_blocks)
        idx = (starts[:, None] + np.arange(block)[None, :]).ravel()[:n]
        q, _ = quintile_labels(h[idx])
        out[r] = _ratio(a[idx], q == 1, q == 5)
    out = out[np.isfinite(out)]
    return float(out.std(ddof=1)) if len(out) > 1 else float("nan")


def magnitude_stats(h, abs_ret, low_pct: float = 0.05, block_s: int = 300,
                    bootstrap_reps: int = 0, seed: int = 0) -> MagnitudeStats:
    """Mean |forward return| by entropy quintile plus the low-tail conditional mean.

    ``ratio`` is Q1 over Q5; ``low_factor`` is the mean below the
    ``low_pct`` entropy percentile over the unconditional mean. Welch's t
    compares the Q1 and Q5 samples. Forward returns overlap, so a moving
    block bootstrap (block ``block_s`` points) gives a second standard error
    for the ratio when ``bootstrap_reps`` > 0.
    """
    h = np.asarray(h, float)
    a = np.abs(np.asarray(abs_ret, float))
    if h.shape != a.shape:
        raise ValueError("entropy and returns must be aligned")
    flags: list[str] = []
    q, edges = quintile_labels(h)
    qn = np.array([(q == k).sum() for k in range(1, 6)])
    qm = np.array([a[q == k].mean() if qn[k - 1] else np.nan for k in range(1, 6)])
    for k in range(5):
        if qn[k] == 0:
            flags.append(f"empty quintile Q{k + 1}")
    low_cut = float(np.percentile(h, 100 * low_pct)) if len(h) else float("nan")
    low = h < low_cut
    if not low.any():
        flags.append("empty low-entropy tail")
    mean = float(a.mean()) if len(a) else float("nan")
    low_mean = float(a[low].mean()) if low.any() else float("nan")
    ratio = _ratio(a, q == 1, q == 5)
    welch = None
    if qn[0] >= 2 and qn[4] >= 2:
        welch = welch_t(a[q == 1], a[q == 5])
    se = None
    if bootstrap_reps > 0 and len(h) > 1:
        se = _block_bootstrap_se(h, a, block_s, bootstrap_reps, seed)
    return MagnitudeStats(int(len(h)), edges, qn, qm, low_cut, int(low.sum()), low_mean, mean,
                          ratio, low_mean / mean if mean > 0 else float("nan"), welch, se, flags)


# ---------------------------------------------------------------- placebos

@dataclass
class PlaceboResult:
    name: str
    observed: float
    null: np.ndarray
    seed: int
    flagged: bool = False

    @property
    def trials(self) -> int:
        return int(len(self.null))

    @property
    def null_mean(self) -> float:
        v = self.null[np.isfinite(self.null)]
        return float(v.mean()) if len(v) else float("nan")

    @property
    def null_sd(self) -> float:
        v = self.null[np.isfinite(self.null)]
        return float(v.std(ddof=1)) if len(v) > 1 else float("nan")

    @property
    def z(self) -> float:
        return placebo_z(self.observed, self.null_mean, self.null_sd)[0]

    @property
    def degenerate(self) -> bool:
        return self.flagged or placebo_z(self.observed, self.null_mean, self.null_sd)[1]

    @property
    def empirical_p(self) -> float:
        """One-sided share of null trials at least as large as the observation."""
        v = self.null[np.isfinite(self.null)]
        if not len(v) or not np.isfinite(self.observed):
            return float("nan")
        return float((1 + np.sum(v >= self.observed)) / (1 + len(v)))

    def to_dict(self) -> dict:
        return {"name": self.name, "observed": _num(self.observed), "null_mean": _num(self.null_mean),
                "null_sd": _num(self.null_sd), "z": _num(self.z), "trials": self.trials,
                "seed": self.seed, "degenerate": self.degenerate, "empirical_p": _num(self.empirical_p)}


def _run_trials(fn: Callable, args: tuple, trials: int, workers: int) -> np.ndarray:
    if workers <= 1 or trials < 2 * workers:
        return fn(*args, 0, trials)
    bounds = np.linspace(0, trials, workers + 1).astype(int)
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(fn, *zip(*[args + (int(lo), int(hi))
                                         for lo, hi in zip(bounds[:-1], bounds[1:])])))
    return np.concatenate(parts)


def _label_trials(a, q1, q5, seed, lo, hi):
    out = np.empty(hi - lo)
    n1 = int(q1.sum())
    for j, t in enumerate(range(lo, hi)):
        rng = np.random.default_rng([seed, t])
        perm = rng.permutation(len(a))
        out[j] = _ratio(a[perm], q1, q5) if n1 else np.nan
    return out


def placebo_label_permutation(h, abs_ret, trials: int = 1000, seed: int = 0,
                              workers: int = 1) -> PlaceboResult:
    """Shuffle |forward return| against timestamps and recompute the Q1/Q5 ratio."""
    h = np.asarray(h, float)
    a = np.abs(np.asarray(abs_ret, float))
    q, _ = quintile_labels(h)
    q1, q5 = q == 1, q == 5
    observed = _ratio(a, q1, q5)
    null = _run_trials(_label_trials, (a, q1, q5, seed), trials, workers)
    flagged = not np.isfinite(observed)
    return PlaceboResult("label_permutation", observed, null, seed, flagged)


def _scramble_trials(a, q1, q5, seed, lo, hi):
    n = len(a)
    out = np.empty(hi - lo)
    for j, t in enumerate(range(lo, hi)):
        rng = np.random.default_rng([seed, t])
        off = int(rng.integers(1, n)) if n > 1 else 0
        out[j] = _ratio(a, np.roll(q1, off), np.roll(q5, off))
    return out


def placebo_temporal_scramble(h, abs_ret, trials: int = 1000, seed: int = 0,
                              workers: int = 1) -> PlaceboResult:
    """Circularly shift the entropy series by a random nonzero offset per trial.

    The shift keeps the entropy series' own autocorrelation and breaks only
    its alignment with the returns.
    """
    h = np.asarray(h, float)
    a = np.abs(np.asarray(abs_ret, float))
    q, _ = quintile_labels(h)
    q1, q5 = q == 1, q == 5
    observed = _ratio(a, q1, q5)
    null = _run_trials(_scramble_trials, (a, q1, q5, seed), trials, workers)
    flagged = not np.isfinite(observed) or len(np.unique(h)) < 2
    return PlaceboResult("temporal_scramble", observed, null, seed, flagged)


def valid_entry_outcomes(sessions, rule: ExitRule) -> tuple[np.ndarray, np.ndarray]:
    """Gross long and short outcomes for every bar that can be entered and exited."""
    longs, shorts = [], []
    for s in sessions:
        bars = s.bars if isinstance(s, SessionData) else s
        if len(bars) < 2:
            continue
        entries = np.arange(len(bars) - 1)
        L, S = entry_outcomes(bars, entries, rule)
        longs.append(L)
        shorts.append(S)
    if not longs:
        return np.empty(0), np.empty(0)
    return np.concatenate(longs), np.concatenate(shorts)


def _random_entry_trials(L, S, n_trades, cost, seed, stream, lo, hi):
    out = np.empty(hi - lo)
    for j, t in enumerate(range(lo, hi)):
        rng = np.random.default_rng([seed, stream, t])
        pick = rng.choice(len(L), size=n_trades, replace=False)
        longs = rng.random(n_trades) < 0.5
        out[j] = np.where(longs, L[pick], S[pick]).sum() - n_trades * cost
    return out


def placebo_random_entry(sessions, n_trades: int, observed_pnl: float, rule: ExitRule,
                         costs: CostModel = CostModel(), trials: int = 10_000, seed: int = 0,
                         workers: int = 1, stream: int = 0) -> PlaceboResult:
    """Total PnL of ``n_trades`` random entries with coin-flip direction, same exit rule.

    Entries are drawn without replacement from every bar of ``sessions``
    that has a later bar to exit into. Trades are independent (no
    one-position limit), which keeps the null exact to sample. Trial ``t``
    draws from ``default_rng([seed, stream, t])``; give each test window its
    own ``stream`` when pooling several.
    """
    L, S = valid_entry_outcomes(sessions, rule)
    if n_trades > len(L):
        raise InsufficientDataError(f"{len(L)} valid entry seconds for {n_trades} trades")
    null = _run_trials(_random_entry_trials,
                       (L, S, int(n_trades), costs.round_trip_bps, seed, stream), trials, workers)
    return PlaceboResult("random_entry", float(observed_pnl), null, seed, n_trades == 0)


def random_entry_expectation(sessions, n_trades: int, rule: ExitRule,
                             costs: CostModel = CostModel()) -> float:
    """Closed-form mean of the random-entry null."""
    L, S = valid_entry_outcomes(sessions, rule)
    if not len(L):
        return float("nan")
    return float(n_trades * ((L.mean() + S.mean()) / 2 - costs.round_trip_bps))


# ---------------------------------------------------------------- attribution

def _locate(sessions, ts: int):
    for s in sessions:
        bars = s.bars if isinstance(s, SessionData) else s
        if len(bars) and bars.ts_s[0] <= ts <= bars.ts_s[-1]:
            i = int(np.searchsorted(bars.ts_s, ts))
            if bars.ts_s[i] == ts:
                return bars, i
    raise ValueError(f"no bar at {ts}")


def coinflip_expectation(result: BacktestResult, sessions, rule_for: Callable[[int], ExitRule] | ExitRule,
                         costs: CostModel = CostModel()) -> float:
    """Expected total PnL with each trade's direction replaced by a fair coin.

    Entry times stay fixed. Per trade this is the mean of the long and the
    short outcome under the same exit rule, so no simulation noise enters.
    ``rule_for`` maps an entry timestamp to its fold's exit rule.
    """
    total = 0.0
    for t in result.trades or []:
        rule = rule_for if isinstance(rule_for, ExitRule) else rule_for(t.entry_ts)
        bars, i = _locate(sessions, t.entry_ts)
        L, S = entry_outcomes(bars, np.array([i]), rule)
        total += (L[0] + S[0]) / 2 - costs.round_trip_bps
    return float(total)


@dataclass(frozen=True)
class Attribution:
    observed: float
    random_entry: float
    coinflip: float
    timing_share: float | None
    payoff_share: float | None
    direction_share: float | None

    @property
    def defined(self) -> bool:
        return self.timing_share is not None

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "component": ["timing", "payoff", "direction"],
            "share": [self.timing_share, self.payoff_share, self.direction_share],
            "bps": [self.coinflip - self.random_entry, self.random_entry,
                    self.observed - self.coinflip],
        })


def attribute_profit(observed: float, random_entry_mean: float, coinflip_mean: float) -> Attribution:
    """Split observed PnL into payoff, timing and direction shares.

    The random-entry null (random times, random direction) is what the exit
    rule alone earns: the payoff share. Moving from random times to the
    strategy's times with random direction adds the timing share. What the
    strategy's own directions add on top is the direction share. Shares sum
    to one and are undefined when observed PnL is not positive.
    """
    if not observed > 0:
        return Attribution(observed, random_entry_mean, coinflip_mean, None, None, None)
    payoff = random_entry_mean / observed
    timing = (coinflip_mean - random_entry_mean) / observed
    direction = (observed - coinflip_mean) / observed
    return Attribution(observed, random_entry_mean, coinflip_mean, timing, payoff, direction)


# ---------------------------------------------------------------- reports

@dataclass
class StatReport:
    magnitude_ratio: float
    welch_t: float
    welch_p: float
    direction_k: int
    direction_n: int
    binom_z: float
    binom_p: float
    placebo_zs: dict = field(default_factory=dict)
    bonferroni_alpha: float = 0.05 / N_TESTS
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in (self.welch_p, self.binom_p):
            if np.isfinite(p) and not 0 <= p <= 1:
                raise ValueError("p-values must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return json.loads(json.dumps(out, default=_jsonable, allow_nan=True))


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (dt.date, dt.datetime)):
        return x.isoformat()
    raise TypeError(f"not serializable: {type(x)}")


def dumps(obj) -> str:
    """JSON with NaN/inf written as null."""
    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, float) and not math.isfinite(o):
            return None
        return o
    return json.dumps(clean(json.loads(json.dumps(obj, default=_jsonable))), indent=2, sort_keys=True)


def direction_hits(result: BacktestResult, sessions, horizon_s: int = 300) -> tuple[int, int]:
    """Trades whose direction matches the sign of the forward return from entry.

    Trades without a full forward horizon or with a zero forward return are
    left out of the count.
    """
    k = n = 0
    cache = {}
    for t in result.trades or []:
        bars, i = _locate(sessions, t.entry_ts)
        key = id(bars)
        if key not in cache:
            cache[key] = forward_return_bps(bars, horizon_s)
        r = cache[key][i]
        if np.isnan(r) or r == 0:
            continue
        n += 1
        k += int(np.sign(r) == t.direction)
    return k, n


def stat_report(mag: MagnitudeStats, result: BacktestResult, sessions, horizon_s: int = 300,
                placebo_zs: dict | None = None, n_tests: int = N_TESTS) -> StatReport:
    k, n = direction_hits(result, sessions, horizon_s)
    b = binomial_direction(k, n) if n else None
    w = result.n_wins
    wb = binomial_direction(w, result.n) if result.n else None
    extras = {"binom_p_exact": None if b is None else b.p_exact,
              "binom_p_corrected": None if b is None else b.p_corrected,
              "wins": w, "trades": result.n,
              "win_z": None if wb is None else wb.z, "win_p": None if wb is None else wb.p,
              "welch_df": None if mag.welch is None else mag.welch.df,
              "ratio_block_se": mag.block_se, "flags": list(mag.flags)}
    return StatReport(
        magnitude_ratio=mag.ratio,
        welch_t=float("nan") if mag.welch is None else mag.welch.t,
        welch_p=float("nan") if mag.welch is None else mag.welch.p,
        direction_k=k, direction_n=n,
        binom_z=float("nan") if b is None else b.z,
        binom_p=float("nan") if b is None else b.p,
        placebo_zs=dict(placebo_zs or {}),
        bonferroni_alpha=0.05 / n_tests,
        extras=extras)


# ---------------------------------------------------------------- walk-forward

@dataclass
class FoldResult:
    index: int
    train_dates: tuple
    test_dates: tuple
    thresholds: Thresholds
    result: BacktestResult
    report: StatReport
    test_start_s: int
    test_end_s: int


@dataclass
class WalkForward:
    spec: FoldSpec
    config: SignalConfig
    costs: CostModel
    folds: list[FoldResult]
    pooled_report: StatReport | None = None

    @property
    def pooled(self) -> BacktestResult:
        return pool_folds([f.result for f in self.folds])

    def rule_for(self, ts: int) -> ExitRule:
        for f in self.folds:
            if f.test_start_s <= ts <= f.test_end_s:
                return ExitRule(f.thresholds.take_profit_bps, self.config.stop_bps,
                                self.config.timeout_s)
        raise ValueError(f"{ts} lies in no test window")

    def table(self) -> pd.DataFrame:
        rows = []
        for f in self.folds:
            rows.append({"fold": str(f.index + 1),
                         "period": f"{f.test_dates[0].isoformat()}..{f.test_dates[1].isoformat()}",
                         "trades": f.result.n, "win_rate": f.result.win_rate,
                         "magnitude_ratio": f.report.magnitude_ratio, "t_stat": f.report.welch_t,
                         "pnl_bps": f.result.total_net_bps,
                         "take_profit_bps": f.thresholds.take_profit_bps})
        p = self.pooled
        pr = self.pooled_report
        rows.append({"fold": "pooled", "period": "", "trades": p.n, "win_rate": p.win_rate,
                     "magnitude_ratio": np.nan if pr is None else pr.magnitude_ratio,
                     "t_stat": np.nan if pr is None else pr.welch_t,
                     "pnl_bps": p.total_net_bps, "take_profit_bps": np.nan})
        return pd.DataFrame(rows)

    def cumulative_pnl(self) -> pd.DataFrame:
        trades = [(f.index + 1, t) for f in self.folds for t in (f.result.trades or [])]
        pnl = np.array([t.net_bps for _, t in trades])
        return pd.DataFrame({"fold": [k for k, _ in trades],
                             "exit_ts": [t.exit_ts for _, t in trades],
                             "net_bps": pnl, "cum_bps": np.cumsum(pnl)})

    def to_dict(self) -> dict:
        p = self.pooled
        return {
            "train_days": self.spec.train_days, "test_days": self.spec.test_days,
            "folds": [{"fold": f.index + 1,
                       "train": [d.isoformat() for d in f.train_dates],
                       "test": [d.isoformat() for d in f.test_dates],
                       "thresholds": dataclasses.asdict(f.thresholds),
                       "trades": f.result.n, "wins": f.result.n_wins,
                       "pnl_bps": f.result.total_net_bps, "report": f.report.to_dict()}
                      for f in self.folds],
            "pooled": {"trades": p.n, "wins": p.n_wins, "win_rate": p.win_rate,
                       "pnl_bps": p.total_net_bps,
                       "report": None if self.pooled_report is None else self.pooled_report.to_dict()},
        }


def run_fold(index: int, train: Sequence[SessionData], test: Sequence[SessionData],
             config: SignalConfig, costs: CostModel, horizon_s: int = 300,
             n_tests: int = N_TESTS, thresholds: Thresholds | None = None) -> FoldResult:
    """Calibrate on ``train`` (unless frozen ``thresholds`` are given) and trade ``test``."""
    audit_fold(train, test)
    th = calibrate(train, config, costs) if thresholds is None else thresholds
    events = generate_signals(test, th, config.band, config.trailing_s)
    rule = ExitRule(th.take_profit_bps, config.stop_bps, config.timeout_s)
    result = run_backtest(events, [s.bars for s in test], rule, costs)
    _, h, a = aligned_magnitude(test, horizon_s)
    mag = magnitude_stats(h, a, config.entropy_pct)
    report = stat_report(mag, result, test, horizon_s, n_tests=n_tests)
    test = [s for s in test if len(s.bars)]
    return FoldResult(index, (train[0].date, train[-1].date), (test[0].date, test[-1].date),
                      th, result, report, test[0].start_s, test[-1].end_s)


def _run_fold_star(args):
    return run_fold(*args)


def walk_forward(sessions: Sequence[SessionData], spec: FoldSpec | None = None,
                 config: SignalConfig = SignalConfig(), costs: CostModel = CostModel(),
                 horizon_s: int = 300, workers: int = 1, n_tests: int = N_TESTS,
                 thresholds: Sequence[Thresholds] | None = None) -> WalkForward:
    """Calibrate on each fold's training sessions and trade its test sessions.

    Passing ``thresholds`` (one per fold) replays a recorded run with those
    frozen values instead of recalibrating. Raises
    :class:`InsufficientDataError` when the data cannot fill a single fold
    and :class:`ProtocolError` if any fold's training data does not end
    before its test data starts.
    """
    sessions = sorted(sessions, key=lambda s: s.date)
    if spec is None:
        spec = make_folds([s.date for s in sessions])
    elif not spec.folds:
        spec = make_folds([s.date for s in sessions], spec.train_days, spec.test_days)
    if thresholds is not None and len(thresholds) != spec.n_folds:
        raise ProtocolError(f"{len(thresholds)} threshold sets for {spec.n_folds} folds")
    jobs = []
    for k, ((tr0, tr1), (te0, te1)) in enumerate(spec.folds):
        train, test = _select(sessions, tr0, tr1), _select(sessions, te0, te1)
        if not train or not test:
            raise InsufficientDataError(f"fold {k + 1} has no sessions")
        th = None if thresholds is None else thresholds[k]
        jobs.append((k, train, test, config, costs, horizon_s, n_tests, th))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            folds = list(pool.map(_run_fold_star, jobs))
    else:
        folds = [run_fold(*j) for j in jobs]
    wf = WalkForward(spec, config, costs, folds)
    test_sessions = [s for j in jobs for s in j[2]]
    _, h, a = aligned_magnitude(test_sessions, horizon_s)
    wf.pooled_report = stat_report(magnitude_stats(h, a, config.entropy_pct), wf.pooled,
                                   test_sessions, horizon_s, n_tests=n_tests)
    return wf


# ---------------------------------------------------------------- sensitivity

@dataclass(frozen=True)
class SensitivityRow:
    param: str
    level: float
    value: float
    valid: bool
    trades: int | None
    pnl_bps: float | None
    pct_change: float | None
    note: str = ""


def perturbed_config(config: SignalConfig, param: str, level: float) -> SignalConfig:
    """``config`` with one parameter scaled by ``level``.

    Percentile thresholds are scaled through their tail mass (the share of
    points beyond the cut), so the volume cut moves as ``1 - (1 - p) * level``.
    The timeout is rounded to whole seconds.
    """
    if param == "entropy_pct":
        return dataclasses.replace(config, entropy_pct=config.entropy_pct * level)
    if param == "volume_pct":
        return dataclasses.replace(config, volume_pct=1 - (1 - config.volume_pct) * level)
    if param == "stop_bps":
        return dataclasses.replace(config, stop_bps=config.stop_bps * level)
    if param == "timeout_s":
        return dataclasses.replace(config, timeout_s=int(round(config.timeout_s * level)))
    raise ValueError(f"unknown sensitivity parameter {param!r}")


def _sweep_one(args):
    sessions, spec, config, costs, param, level = args
    try:
        cfg = perturbed_config(config, param, level)
    except ValueError as exc:
        return param, level, float("nan"), None, str(exc)
    value = float(getattr(cfg, param))
    try:
        wf = walk_forward(sessions, spec, cfg, costs)
    except (InsufficientDataError, ValueError) as exc:
        return param, level, value, None, str(exc)
    p = wf.pooled
    return param, level, value, (p.n, p.total_net_bps), ""


def sensitivity_sweep(sessions: Sequence[SessionData], spec: FoldSpec | None = None,
                      config: SignalConfig = SignalConfig(), costs: CostModel = CostModel(),
                      levels: Sequence[float] = SENSITIVITY_LEVELS,
                      params: Sequence[str] = SENSITIVITY_PARAMS,
                      workers: int = 1) -> list[SensitivityRow]:
    """Re-run the whole walk-forward with one parameter perturbed at a time.

    Returns ``len(params) * len(levels)`` rows; configurations that fail
    validation are kept as invalid rows.
    """
    base = walk_forward(sessions, spec, config, costs).pooled
    base_pnl = base.total_net_bps
    jobs = [(list(sessions), spec, config, costs, p, lv) for p in params for lv in levels
            if lv != 1.0]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_sweep_one, jobs))
    else:
        done = [_sweep_one(j) for j in jobs]
    lookup = {(d[0], d[1]): d for d in done}
    rows = []
    for p in params:
        for lv in levels:
            if lv == 1.0:
                rows.append(SensitivityRow(p, lv, float(getattr(config, p)), True, base.n,
                                           base_pnl, 0.0, "baseline"))
                continue
            _, _, value, res, note = lookup[(p, lv)]
            if res is None:
                rows.append(SensitivityRow(p, lv, value, False, None, None, None, note))
                continue
            n, pnl = res
            pct = (pnl - base_pnl) / abs(base_pnl) if base_pnl else None
            rows.append(SensitivityRow(p, lv, value, True, n, pnl, pct, note))
    return rows


def sensitivity_frame(rows: Sequence[SensitivityRow]) -> pd.DataFrame:
    return pd.DataFrame([dataclasses.asdict(r) for r in rows])


# ---------------------------------------------------------------- full run

@dataclass(frozen=True)
class ValidationConfig:
    label_trials: int = 1000
    scramble_trials: int = 1000
    random_entry_trials: int = 10_000
    seed: int = 7
    horizon_s: int = 300
    n_tests: int = N_TESTS
    bootstrap_reps: int = 200
    sensitivity: bool = True

    def __post_init__(self):
        for name in ("label_trials", "scramble_trials", "random_entry_trials"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be at least 2")
        if self.horizon_s <= 0 or self.n_tests < 1 or self.bootstrap_reps < 0:
            raise ValueError("horizon_s and n_tests must be positive, bootstrap_reps non-negative")


@dataclass
class ValidationReport:
    report: StatReport
    magnitude: MagnitudeStats
    placebos: dict
    attribution: Attribution
    sensitivity: list[SensitivityRow]
    config: ValidationConfig

    def to_dict(self) -> dict:
        return {"stats": self.report.to_dict(), "magnitude": self.magnitude.to_dict(),
                "placebos": {k: v.to_dict() for k, v in self.placebos.items()},
                "attribution": dataclasses.asdict(self.attribution),
                "sensitivity": [dataclasses.asdict(r) for r in self.sensitivity],
                "config": dataclasses.asdict(self.config)}


def validate(sessions: Sequence[SessionData], wf: WalkForward,
             config: ValidationConfig = ValidationConfig(), workers: int = 1) -> ValidationReport:
    """Statistics, placebos, attribution and sensitivity for a finished walk-forward.

    Magnitude statistics and the two alignment placebos use every session;
    the random-entry null and attribution use the test sessions only.
    """
    sessions = sorted(sessions, key=lambda s: s.date)
    seed = config.seed
    _, h, a = aligned_magnitude(sessions, config.horizon_s)
    mag = magnitude_stats(h, a, wf.config.entropy_pct, config.horizon_s, config.bootstrap_reps, seed)
    test = [s for f in wf.folds for s in _select(sessions, *f.test_dates)]
    pooled = wf.pooled

    label = placebo_label_permutation(h, a, config.label_trials, seed, workers)
    scramble = placebo_temporal_scramble(h, a, config.scramble_trials, seed, workers)
    nulls = []
    for f in wf.folds:
        fold_test = _select(sessions, *f.test_dates)
        rule = ExitRule(f.thresholds.take_profit_bps, wf.config.stop_bps, wf.config.timeout_s)
        nulls.append(placebo_random_entry(fold_test, f.result.n, f.result.total_net_bps, rule,
                                          wf.costs, config.random_entry_trials, seed, workers,
                                          stream=f.index + 1))
    # independent per-fold draws with aligned trial indices sum to the pooled null
    total_null = np.sum([n.null for n in nulls], axis=0) if nulls else np.empty(0)
    random_entry = PlaceboResult("random_entry", pooled.total_net_bps, total_null, seed,
                                 pooled.n == 0)
    re_mean = sum(random_entry_expectation(_select(sessions, *f.test_dates), f.result.n,
                                           ExitRule(f.thresholds.take_profit_bps, wf.config.stop_bps,
                                                    wf.config.timeout_s), wf.costs)
                  for f in wf.folds)
    coin = coinflip_expectation(pooled, test, wf.rule_for, wf.costs)
    attribution = attribute_profit(pooled.total_net_bps, re_mean, coin)

    placebos = {p.name: p for p in (label, scramble, random_entry)}
    report = stat_report(mag, pooled, test, config.horizon_s,
                         {k: _num(v.z) for k, v in placebos.items()}, config.n_tests)
    report.extras.update(low_factor=_num(mag.low_factor), random_entry_mean_exact=re_mean,
                         coinflip_pnl=coin)
    rows = sensitivity_sweep(sessions, wf.spec, wf.config, wf.costs, workers=workers) \
        if config.sensitivity else []
    return ValidationReport(report, mag, placebos, attribution, rows, config)
