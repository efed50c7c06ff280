import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from flowentropy import _kernels, markov
from flowentropy.markov import (K, MarketState, StateSequence, TransitionMatrix, encode_states,
                                entropy, entropy_series, estimate_transitions, stationary)
from tests.conftest import bars_from


def random_stochastic(rng, k=K, zero_rows=0):
    m = rng.random((k, k)) ** 3
    m /= m.sum(axis=1, keepdims=True)
    return m


def lstsq_stationary(P):
    k = len(P)
    A = np.vstack([P.T - np.eye(k), np.ones(k)])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def brute_quintile(ts, vol, i, window):
    w = (ts > ts[i] - window) & (ts <= ts[i])
    frac = np.count_nonzero(vol[w] <= vol[i]) / np.count_nonzero(w)
    return min(5, max(1, math.ceil(5 * frac - 1e-12)))


# encode_states

def test_state_index_round_trip():
    for i in range(K):
        assert MarketState.from_index(i).index == i
    assert MarketState(-1, 1).index == 0 and MarketState(1, 5).index == 14
    with pytest.raises(ValueError):
        MarketState(2, 1)


def test_rising_price_max_volume_is_up_q5():
    bars = bars_from([0, 1], [100.00, 100.02], [10, 50])
    assert list(encode_states(bars)) == [(1, MarketState(1, 5))]


def test_constant_bars_map_to_flat_q5():
    bars = bars_from(range(200), [100.0] * 200, [7] * 200)
    seq = encode_states(bars)
    assert len(seq) == 199
    assert set(seq.index.tolist()) == {MarketState(0, 5).index}


def test_first_bar_emits_no_state():
    seq = encode_states(bars_from([5], [1.0], [1]))
    assert len(seq) == 0


def test_sign_crosses_gaps():
    bars = bars_from([0, 10, 40], [100.0, 99.0, 99.5], [1, 1, 1])
    assert [s.sign for _, s in encode_states(bars)] == [-1, 1]


def test_quintile_matches_brute_force():
    rng = np.random.default_rng(1)
    ts = np.cumsum(rng.integers(1, 4, 2000))
    vol = rng.integers(1, 30, 2000)
    bars = bars_from(ts, 100 + rng.normal(0, 0.1, 2000).cumsum(), vol)
    seq = encode_states(bars, 120)
    for k in rng.choice(len(seq), 300, replace=False):
        i = k + 1
        assert MarketState.from_index(int(seq.index[k])).quintile == brute_quintile(ts, vol, i, 120)


def test_encode_rejects_bad_input():
    with pytest.raises(ValueError):
        encode_states(bars_from([0, 1], [1, 1], [1, 1]), window_s=5)
    with pytest.raises(ValueError):
        encode_states(bars_from([1, 1], [1, 1], [1, 1]))


# estimate_transitions

def test_alternating_window():
    a, b = 3, 11
    seq = StateSequence(np.arange(4), np.array([a, b, a, b]))
    P = estimate_transitions(seq, 3, 120)
    assert P.n_transitions == 3
    assert P.probs[a, b] == 1.0 and P.probs[b, a] == 1.0
    others = [i for i in range(K) if i not in (a, b)]
    np.testing.assert_array_equal(P.probs[others], np.full((13, K), 1 / K))


def test_empty_window_is_uniform():
    seq = StateSequence(np.arange(4), np.array([1, 2, 3, 4]))
    P = estimate_transitions(seq, 1000, 120)
    assert P.n_transitions == 0
    np.testing.assert_array_equal(P.probs, np.full((K, K), 1 / K))
    assert entropy(P) == 1.0


def test_counts_match_independent_tally():
    rng = np.random.default_rng(5)
    ts = np.cumsum(rng.integers(1, 3, 500))
    idx = rng.integers(0, K, 500)
    t = int(ts[300])
    P = estimate_transitions(StateSequence(ts, idx), t, 120)
    tally = np.zeros((K, K))
    for j in range(1, len(ts)):
        if t - 120 < ts[j] <= t:
            tally[idx[j - 1], idx[j]] += 1
    np.testing.assert_array_equal(P.counts, tally)
    rows = tally.sum(axis=1)
    for i in range(K):
        expect = tally[i] / rows[i] if rows[i] else np.full(K, 1 / K)
        np.testing.assert_allclose(P.probs[i], expect, rtol=0, atol=1e-15)
    np.testing.assert_allclose(P.probs.sum(axis=1), 1.0, atol=1e-12)


# stationary

def test_uniform_and_cycle_are_uniform():
    for P in (np.full((K, K), 1 / K), np.roll(np.eye(K), 1, axis=1)):
        d = stationary(P)
        assert d.converged
        np.testing.assert_allclose(d.pi, 1 / K, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_stationary_matches_linear_solve(seed):
    P = random_stochastic(np.random.default_rng(seed))
    d = stationary(P)
    assert d.converged and d.residual <= 1e-10
    np.testing.assert_allclose(d.pi, lstsq_stationary(P), atol=1e-8)
    assert abs(d.pi.sum() - 1) < 1e-12 and np.all(d.pi >= 0)


def test_slow_mixing_chain_converges():
    P = np.eye(K) * (1 - 1e-4) + 1e-4 / K
    P[0] = 1 / K
    d = stationary(P)
    assert d.converged
    np.testing.assert_allclose(d.pi, lstsq_stationary(P), atol=1e-8)


def test_near_reducible_chain_is_flagged_not_fabricated():
    # spectral gap ~1e-4: no 10,000-step power iteration can reach 1e-10
    P = np.full((K, K), 1e-4 / (K - 1))
    np.fill_diagonal(P, 0.0)
    P[:, 0] *= 0.5
    P /= P.sum(axis=1, keepdims=True) / 1e-4
    np.fill_diagonal(P, 1 - 1e-4)
    P /= P.sum(axis=1, keepdims=True)
    with pytest.warns(markov.StationaryWarning):
        d = stationary(P)
    assert not d.converged and d.residual > 1e-10
    assert d.iterations <= markov.STATIONARY_MAX_ITER
    assert abs(d.pi.sum() - 1) < 1e-12


def test_nonconvergence_warns_and_returns_best():
    P = random_stochastic(np.random.default_rng(0))
    with pytest.warns(markov.StationaryWarning):
        d = stationary(P, tol=0.0, max_iter=3)
    assert not d.converged and d.residual >= 0


# entropy

def test_entropy_frozen_values():
    assert entropy(np.full((K, K), 1 / K)) == 1.0
    assert entropy(np.roll(np.eye(K), 1, axis=1)) == 0.0
    three = np.zeros((K, K))
    for i in range(K):
        three[i, [i, (i + 1) % K, (i + 2) % K]] = 1 / 3
    assert entropy(three) == pytest.approx(math.log(3) / math.log(15), abs=1e-12)
    assert entropy(three) == pytest.approx(0.40568, abs=1e-5)


def test_entropy_weighted_by_stationary():
    P = np.full((K, K), 1 / K)
    P[0] = 0
    P[0, 0] = 1.0
    pi = np.zeros(K)
    pi[0] = 1.0
    assert entropy(P, pi) == 0.0
    pi = np.full(K, 1 / K)
    assert entropy(P, pi) == pytest.approx(14 / 15, abs=1e-12)


stochastic = hnp.arrays(np.float64, (K, K), elements=st.floats(0, 1)).map(
    lambda m: TransitionMatrix.from_counts(m * 20).probs)


@pytest.mark.filterwarnings("ignore::flowentropy.markov.StationaryWarning")
@settings(max_examples=200, deadline=None)
@given(stochastic)
def test_entropy_in_unit_interval(P):
    assert 0.0 <= entropy(P) <= 1.0


@pytest.mark.filterwarnings("ignore::flowentropy.markov.StationaryWarning")
@settings(max_examples=200, deadline=None)
@given(stochastic, st.permutations(range(K)))
def test_entropy_label_permutation_invariant(P, perm):
    perm = np.asarray(perm)
    Q = P[np.ix_(perm, perm)]
    assert entropy(Q) == pytest.approx(entropy(P), abs=1e-12)


def test_entropy_permutation_invariant_bulk():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        counts = rng.integers(0, 5, (K, K)).astype(float)
        perm = rng.permutation(K)
        P = TransitionMatrix.from_counts(counts)
        Q = TransitionMatrix.from_counts(counts[np.ix_(perm, perm)])
        assert abs(entropy(P) - entropy(Q)) <= 1e-12


def test_buy_sell_swap_invariance():
    swap = np.array([MarketState(-s.sign, s.quintile).index
                     for s in map(MarketState.from_index, range(K))])
    rng = np.random.default_rng(2)
    for _ in range(200):
        counts = rng.integers(0, 6, (K, K)).astype(float)
        a = entropy(TransitionMatrix.from_counts(counts))
        b = entropy(TransitionMatrix.from_counts(counts[np.ix_(swap, swap)]))
        assert abs(a - b) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.permutations(range(K)))
def test_mixing_toward_uniform_is_monotone(perm):
    D = np.eye(K)[list(perm)]
    U = np.full((K, K), 1 / K)
    hs = [entropy((1 - lam) * D + lam * U) for lam in np.linspace(0, 1, 21)]
    assert np.all(np.diff(hs) >= -1e-12)
    assert hs[0] == 0.0 and hs[-1] == 1.0


@pytest.mark.filterwarnings("ignore::flowentropy.markov.StationaryWarning")
@settings(max_examples=100, deadline=None)
@given(stochastic)
def test_stationary_fixed_point(P):
    d = stationary(P)
    if d.converged:
        assert np.abs(d.pi @ P - d.pi).sum() <= 1e-10


# entropy_series

def _series_from_states(idx, window=120, min_transitions=30):
    ts = np.arange(len(idx), dtype=np.int64)
    h, n, ok, _ = _kernels.entropy_series(ts, np.asarray(idx, np.int64), window, min_transitions,
                                          markov.STATIONARY_TOL, markov.STATIONARY_MAX_ITER)
    return h, n, ok


def test_warm_up_points_undefined():
    rng = np.random.default_rng(0)
    bars = bars_from(np.arange(600), 100 + rng.normal(0, 0.01, 600).cumsum(),
                     rng.integers(1, 100, 600))
    s = entropy_series(bars)
    assert len(s) == 599
    first = s.ts_s < 31
    assert np.all(np.isnan(s.h[first]))
    assert np.all(s.defined[~first])
    assert np.all(s.n_transitions[s.defined] >= 30)


def test_iid_states_have_high_entropy():
    for seed in range(3):
        idx = np.random.default_rng(seed).integers(0, K, 20_000)
        h, _, ok = _series_from_states(idx, window=7200)
        assert ok.all()
        assert np.nanmean(h[-5000:]) > 0.95 and np.nanmin(h[-5000:]) > 0.95


def test_two_state_loop_has_low_entropy():
    idx = np.tile([4, 9], 500)
    h, _, _ = _series_from_states(idx)
    defined = h[~np.isnan(h)]
    assert len(defined) and np.all(defined < 0.05)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(50, 900))
def test_window_causality(seed, cut):
    rng = np.random.default_rng(seed)
    ts = np.cumsum(rng.integers(1, 3, 1000))
    bars = bars_from(ts, 100 + rng.normal(0, 0.02, 1000).cumsum(), rng.integers(1, 50, 1000))
    full = entropy_series(bars)
    t = int(ts[cut])
    part = entropy_series(bars[: cut + 1])
    keep = full.ts_s <= t
    np.testing.assert_array_equal(part.ts_s, full.ts_s[keep])
    np.testing.assert_array_equal(part.h, full.h[keep])


def test_entropy_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    bars = bars_from(np.arange(300), 100 + rng.normal(0, 0.01, 300).cumsum(),
                     rng.integers(1, 9, 300))
    s = entropy_series(bars)
    back = markov.read_entropy(markov.write_entropy(tmp_path / "e.csv", s, {"k": 1}))
    np.testing.assert_array_equal(back.ts_s, s.ts_s)
    np.testing.assert_array_equal(back.h, s.h)


def test_dump_matrix_shape():
    text = markov.dump_matrix(TransitionMatrix.from_counts(np.zeros((K, K))))
    rows = text.strip().split("\n")
    assert len(rows) == K and all(len(r.split(",")) == K for r in rows)
