"""Acceptance criteria 1-8.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion in the terminal summary.
"""

import dataclasses
import math
import os
import time

import numpy as np
import pytest

from flowentropy import ingest, markov, synth, validate as V
from flowentropy.backtest import BacktestResult, CostModel, pool_folds
from flowentropy.markov import K, MarketState, TransitionMatrix, entropy, stationary
from flowentropy.session import build_session
from flowentropy.signal import calibrate, generate_signals

WORKERS = max(1, min(8, os.cpu_count() or 1))


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# 1 -------------------------------------------------------------------------

@criterion(1, "entropy analytics")
def test_entropy_analytics(record_property):
    t0 = time.perf_counter()
    uniform = entropy(np.full((K, K), 1 / K))
    cycle = entropy(np.roll(np.eye(K), 1, axis=1))
    three = np.zeros((K, K))
    for i in range(K):
        three[i, [(i + j) % K for j in range(3)]] = 1 / 3
    h3 = entropy(three)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"uniform={uniform!r} cycle={cycle!r} three-state={h3:.12f} "
                              f"in {elapsed * 1e3:.1f} ms")
    assert uniform == 1.0
    assert cycle == 0.0
    assert abs(h3 - math.log(3) / math.log(15)) <= 1e-12


# 2 -------------------------------------------------------------------------

@criterion(2, "permutation invariance")
def test_permutation_invariance(record_property):
    rng = np.random.default_rng(2)
    swap = np.array([MarketState(-s.sign, s.quintile).index
                     for s in map(MarketState.from_index, range(K))])
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        counts = rng.integers(0, 8, (K, K)) * (rng.random((K, K)) < 0.6)
        h = entropy(TransitionMatrix.from_counts(counts))
        perms = [swap] + [rng.permutation(K) for _ in range(50)]
        for perm in perms:
            hp = entropy(TransitionMatrix.from_counts(counts[np.ix_(perm, perm)]))
            worst = max(worst, abs(hp - h))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |dH|={worst:.2e} over 51,000 relabelings in {elapsed:.1f} s")
    assert worst <= 1e-12
    assert elapsed < 60


# 3 -------------------------------------------------------------------------

@criterion(3, "stationary fixed point")
def test_stationary_fixed_point(record_property):
    rng = np.random.default_rng(3)
    worst_res = worst_gap = 0.0
    for i in range(1000):
        if i % 2:
            P = rng.dirichlet(np.full(K, 10 ** rng.uniform(-1.0, 0.7)), size=K)
        else:
            P = rng.random((K, K))
            P /= P.sum(axis=1, keepdims=True)
        d = stationary(P)
        A = np.vstack([P.T - np.eye(K), np.ones(K)])
        oracle = np.linalg.lstsq(A, np.r_[np.zeros(K), 1.0], rcond=None)[0]
        assert d.converged
        worst_res = max(worst_res, float(np.abs(d.pi @ P - d.pi).sum()))
        worst_gap = max(worst_gap, float(np.abs(d.pi - oracle).max()))
    record_property("detail", f"max residual={worst_res:.2e}, max oracle gap={worst_gap:.2e}")
    assert worst_res <= 1e-10
    assert worst_gap <= 1e-8


# 4 -------------------------------------------------------------------------

@criterion(4, "published arithmetic")
def test_published_arithmetic(record_property):
    b = V.binomial_direction(108, 240)
    folds = [(32, 23, 179.9), (27, 9, 212.9), (77, 34, 433.2), (12, 5, 66.5), (92, 37, 233.1)]
    pooled = pool_folds([BacktestResult.from_summary(n, w, pnl, window=(10 * k, 10 * k + 5))
                         for k, (n, w, pnl) in enumerate(folds)])
    z, _ = V.placebo_z(2.17, 1.02, 0.08)
    cost = CostModel().round_trip_bps
    record_property("detail", f"z={b.z:.3f} p={b.p:.3f}; pooled n={pooled.n} "
                              f"win={pooled.win_rate:.3f} pnl={pooled.total_net_bps:.1f}; "
                              f"placebo z={z:.3f}; cost={cost!r}")
    assert abs(b.z - (-1.55)) <= 0.01 and abs(b.p - 0.12) <= 0.01
    assert pooled.n == 240
    assert abs(100 * pooled.win_rate - 45.0) <= 0.1
    assert abs(pooled.total_net_bps - 1125.6) <= 0.05
    assert abs(z - 14.4) <= 0.1
    assert abs(cost - 0.57) <= 1e-12


# 5 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def validation36(market36, walkforward36):
    _, sessions = market36
    cfg = V.ValidationConfig(sensitivity=False)
    t0 = time.perf_counter()
    rep = V.validate(sessions, walkforward36, cfg, workers=WORKERS)
    return rep, time.perf_counter() - t0


@pytest.mark.slow
@criterion(5, "synthetic-oracle reproduction")
def test_magnitude_ratio(validation36, record_property):
    rep, _ = validation36
    m = rep.magnitude
    record_property("detail", f"(a) Q1/Q5={m.ratio:.3f} Welch t={m.welch.t:.1f}")
    assert m.ratio > 1.5
    assert m.welch.t > 3


@pytest.mark.slow
@criterion(5, "synthetic-oracle reproduction")
def test_direction_accuracy_is_chance(validation36, record_property):
    rep, _ = validation36
    r = rep.report
    lo, hi = r.direction_n / 2 - 1.96 * math.sqrt(r.direction_n / 4), \
        r.direction_n / 2 + 1.96 * math.sqrt(r.direction_n / 4)
    record_property("detail", f"(b) direction {r.direction_k}/{r.direction_n}="
                              f"{r.direction_k / r.direction_n:.3f}, band [{lo:.0f}, {hi:.0f}]")
    assert r.direction_n > 0
    assert lo <= r.direction_k <= hi


@pytest.mark.slow
@criterion(5, "synthetic-oracle reproduction")
def test_placebos_reject(validation36, record_property):
    rep, elapsed = validation36
    lp, re = rep.placebos["label_permutation"], rep.placebos["random_entry"]
    record_property("detail", f"(c) label z={lp.z:.1f} random-entry z={re.z:.1f} "
                              f"({lp.trials}/{re.trials} trials, {elapsed:.0f} s)")
    assert lp.trials == 1000 and re.trials == 10_000
    assert lp.z > 3 and re.z > 3


@pytest.mark.slow
@criterion(5, "synthetic-oracle reproduction")
def test_direction_share_near_zero(validation36, record_property):
    rep, _ = validation36
    at = rep.attribution
    record_property("detail", f"(d) direction share={100 * at.direction_share:+.1f} pts "
                              f"(timing {100 * at.timing_share:.1f}, payoff {100 * at.payoff_share:.1f})")
    assert at.defined
    assert abs(at.direction_share) <= 0.05
    assert abs(at.timing_share + at.payoff_share + at.direction_share - 1) <= 1e-3


# 6 -------------------------------------------------------------------------

def _truncated_sessions(market, t):
    out = []
    for d in market.days:
        kept, _ = ingest.filter_session(d.ticks, d.session)
        kept = kept[kept.ts_ns < (t + 1) * ingest.NS_PER_S]
        if len(kept):
            out.append(build_session(ingest.aggregate_bars(kept, d.session), d.session.date))
    return out


def _trade_bytes(trades):
    return repr([dataclasses.astuple(t) for t in trades]).encode()


@pytest.mark.slow
@criterion(6, "anti-leakage")
def test_truncation_and_fold_audit(market36, walkforward36, record_property):
    market, sessions = market36
    wf = walkforward36
    for f in wf.folds:
        V.audit_fold(V._select(sessions, *f.train_dates), V._select(sessions, *f.test_dates))
    rng = np.random.default_rng(6)
    checked = 0
    for f in wf.folds:
        test = V._select(sessions, *f.test_dates)
        day = test[int(rng.integers(len(test)))]
        t = int(rng.integers(day.start_s + 600, day.end_s - 600))
        trunc = _truncated_sessions(market, t)
        full_by_date = {s.date: s for s in sessions}
        for s in trunc:
            full = full_by_date[s.date].entropy
            keep = full.ts_s <= t
            assert s.entropy.ts_s.tobytes() == full.ts_s[keep].tobytes()
            assert s.entropy.h.tobytes() == full.h[keep].tobytes()
        train = V._select(trunc, *f.train_dates)
        th = calibrate(train, wf.config, wf.costs)
        assert th == f.thresholds
        test_trunc = V._select(trunc, *f.test_dates)
        sig_full = [e for e in generate_signals(test, th) if e.ts_s <= t]
        sig_trunc = generate_signals(test_trunc, th)
        assert repr(sig_trunc).encode() == repr(sig_full).encode()
        fold = V.run_fold(f.index, train, test_trunc, wf.config, wf.costs, thresholds=th)
        # a position still open at t is force-closed on the last bar <= t, so only
        # trades that finished before t can be compared field by field
        closed_full = [x for x in f.result.trades if x.exit_ts < t]
        closed_trunc = [x for x in fold.result.trades if x.exit_ts < t]
        assert _trade_bytes(closed_trunc) == _trade_bytes(closed_full)
        opened_full = [(x.entry_ts, x.direction, x.entry_px, x.signal_ts)
                       for x in f.result.trades if x.entry_ts <= t]
        opened_trunc = [(x.entry_ts, x.direction, x.entry_px, x.signal_ts)
                        for x in fold.result.trades if x.entry_ts <= t]
        assert opened_trunc == opened_full
        checked += len(opened_full)
    record_property("detail", f"5 cut points, {checked} trades compared, fold audit ok")


# 7 -------------------------------------------------------------------------

@criterion(7, "throughput")
def test_throughput(tmp_path, record_property):
    cfg = synth.SynthConfig(seed=3, n_days=1, base_tick_rate=42.0)
    day, _ = synth.generate_day(cfg, 0)
    path = ingest.write_ticks(tmp_path / "ticks.csv", day.ticks)
    warm = ingest.Bars(np.arange(200), np.ones(200), np.ones(200, np.int64))
    markov.entropy_series(warm)
    t0 = time.perf_counter()
    ticks, _ = ingest.parse_ticks(path)
    kept, _ = ingest.filter_session(ticks, day.session)
    bars = ingest.aggregate_bars(kept, day.session)
    series = markov.entropy_series(bars, window_s=120)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(ticks):,} ticks -> {len(bars):,} bars -> "
                              f"{len(series):,} entropy points in {elapsed:.2f} s")
    assert len(ticks) >= 1_000_000
    assert elapsed < 10


# 8 -------------------------------------------------------------------------

@pytest.mark.slow
@criterion(8, "sensitivity sweep")
def test_sensitivity_sweep(market36, record_property):
    _, sessions = market36
    a = V.sensitivity_sweep(sessions, workers=WORKERS)
    b = V.sensitivity_sweep(sessions, workers=1)
    frame = V.sensitivity_frame(a)
    base = [r for r in a if r.level == 1.0]
    profitable = sum(1 for r in a if r.valid and r.pnl_bps > 0)
    worst = min(r.pct_change for r in a if r.valid)
    record_property("detail", f"{len(a)} rows, {profitable} profitable, "
                              f"worst change {100 * worst:+.1f}%")
    assert len(a) == 20 and len(frame) == 20
    assert {(r.param, r.level) for r in a} == {(p, lv) for p in V.SENSITIVITY_PARAMS
                                               for lv in V.SENSITIVITY_LEVELS}
    assert a == b
    assert len(base) == 4 and len({r.pnl_bps for r in base}) == 1
