"""15-state order-flow chain: state encoding, transition estimates, entropy.

A state pairs the sign of the close-to-close price change with the
volume quintile of the current second inside a trailing window. Entropy
is the stationary-weighted mean of the row entropies of the estimated
transition matrix, divided by ``log 15``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
import pandas as pd

from . import _kernels
from ._csvio import read_frame, write_frame
from .ingest import Bars

logger = logging.getLogger(__name__)

K = 15
STATIONARY_TOL = 1e-10
STATIONARY_MAX_ITER = 10_000
ENTROPY_COLUMNS = ["ts_s", "h", "defined", "n_transitions"]


class StationaryWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MarketState:
    sign: int
    quintile: int

    def __post_init__(self):
        if self.sign not in (-1, 0, 1) or not 1 <= self.quintile <= 5:
            raise ValueError(f"invalid state ({self.sign}, {self.quintile})")

    @property
    def index(self) -> int:
        return (self.sign + 1) * 5 + (self.quintile - 1)

    @classmethod
    def from_index(cls, index: int) -> "MarketState":
        if not 0 <= index < K:
            raise ValueError(f"state index {index} out of range")
        return cls(index // 5 - 1, index % 5 + 1)


@dataclass
class StateSequence:
    """Encoded states of one session; ``index[k]`` is the state at ``ts_s[k]``."""

    ts_s: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.ts_s)

    def __iter__(self) -> Iterator[tuple[int, MarketState]]:
        for t, i in zip(self.ts_s.tolist(), self.index.tolist()):
            yield t, MarketState.from_index(i)

    @classmethod
    def from_pairs(cls, pairs) -> "StateSequence":
        pairs = list(pairs)
        ts = np.array([t for t, _ in pairs], dtype=np.int64)
        idx = np.array([s.index if isinstance(s, MarketState) else int(s) for _, s in pairs],
                       dtype=np.int64)
        return cls(ts, idx)


@dataclass
class TransitionMatrix:
    counts: np.ndarray
    probs: np.ndarray
    window_end_s: int | None = None

    @property
    def n_transitions(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_counts(cls, counts, window_end_s: int | None = None) -> "TransitionMatrix":
        counts = np.asarray(counts, dtype=np.float64)
        return cls(counts, _kernels.probs_from_counts(counts), window_end_s)

    @classmethod
    def from_probs(cls, probs) -> "TransitionMatrix":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] != probs.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("matrix is not row-stochastic")
        return cls(np.zeros_like(probs), probs)


@dataclass(frozen=True)
class StationaryDist:
    pi: np.ndarray
    residual: float
    iterations: int
    converged: bool


class EntropyPoint(NamedTuple):
    ts_s: int
    h: float
    defined: bool
    n_transitions: int


@dataclass
class EntropySeries:
    """Entropy at every state-bearing bar of a session (``h`` is NaN when undefined)."""

    ts_s: np.ndarray
    h: np.ndarray
    n_transitions: np.ndarray
    converged: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.h)

    @property
    def n_unconverged(self) -> int:
        return int(np.count_nonzero(~self.converged))

    def __len__(self) -> int:
        return len(self.ts_s)

    def __iter__(self) -> Iterator[EntropyPoint]:
        for t, h, n in zip(self.ts_s.tolist(), self.h.tolist(), self.n_transitions.tolist()):
            yield EntropyPoint(t, h, not np.isnan(h), n)

    @classmethod
    def concat(cls, parts) -> "EntropySeries":
        parts = list(parts)
        if not parts:
            return cls(np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64),
                       np.empty(0, bool))
        return cls(np.concatenate([p.ts_s for p in parts]), np.concatenate([p.h for p in parts]),
                   np.concatenate([p.n_transitions for p in parts]),
                   np.concatenate([p.converged for p in parts]))


def encode_states(bars: Bars, window_s: int = 120) -> StateSequence:
    """Map each bar after the first to its (sign, volume quintile) state.

    The quintile is ``ceil(5 F)`` where F is the fraction of bars in
    ``(t - window_s, t]``, current bar included, whose volume is at most the
    current volume. Constant volume therefore maps to quintile 5.
    """
    if window_s < 10:
        raise ValueError("window_s must be at least 10 seconds")
    if len(bars) > 1 and np.any(np.diff(bars.ts_s) <= 0):
        raise ValueError("bars must be strictly increasing in time")
    idx = _kernels.encode_states(bars.ts_s, bars.close, bars.volume, int(window_s))
    return StateSequence(bars.ts_s[1:].copy(), idx)


def estimate_transitions(states: StateSequence, t: int, window_s: int = 120) -> TransitionMatrix:
    """Count transitions whose later state is stamped in ``(t - window_s, t]``."""
    later = np.arange(1, len(states))
    ts_later = states.ts_s[1:]
    sel = later[(ts_later > t - window_s) & (ts_later <= t)]
    counts = np.zeros((K, K))
    np.add.at(counts, (states.index[sel - 1], states.index[sel]), 1.0)
    return TransitionMatrix.from_counts(counts, window_end_s=t)


def stationary(P: TransitionMatrix | np.ndarray, tol: float = STATIONARY_TOL,
               max_iter: int = STATIONARY_MAX_ITER) -> StationaryDist:
    """Stationary distribution by power iteration from the uniform vector.

    Non-convergence never raises: the best iterate comes back with its
    residual and ``converged=False``, and a :class:`StationaryWarning` is issued.
    """
    probs = P.probs if isinstance(P, TransitionMatrix) else np.asarray(P, dtype=np.float64)
    pi, residual, iterations, ok = _kernels.stationary_power(np.ascontiguousarray(probs), tol,
                                                              max_iter)
    if not ok:
        warnings.warn(f"power iteration stopped at residual {residual:.3g} after {iterations} "
                      "iterations", StationaryWarning, stacklevel=2)
    return StationaryDist(pi, float(residual), int(iterations), bool(ok))


def entropy(P: TransitionMatrix | np.ndarray, pi: StationaryDist | np.ndarray | None = None) -> float:
    """Normalized entropy in [0, 1]; natural log, ``0 log 0 = 0``."""
    probs = P.probs if isinstance(P, TransitionMatrix) else np.asarray(P, dtype=np.float64)
    if pi is None:
        pi = stationary(probs)
    vec = pi.pi if isinstance(pi, StationaryDist) else np.asarray(pi, dtype=np.float64)
    return float(_kernels.normalized_entropy(np.ascontiguousarray(probs), vec))


def entropy_series(bars: Bars, window_s: int = 120, min_transitions: int = 30,
                   tol: float = STATIONARY_TOL, max_iter: int = STATIONARY_MAX_ITER) -> EntropySeries:
    """Rolling entropy for one session.

    Both the volume-quintile window and the transition window have length
    ``window_s``. Points with fewer than ``min_transitions`` transitions in
    their window are undefined (NaN).
    """
    states = encode_states(bars, window_s)
    h, n, ok, _ = _kernels.entropy_series(states.ts_s, states.index, int(window_s),
                                          int(min_transitions), tol, max_iter)
    series = EntropySeries(states.ts_s, h, n, ok)
    if series.n_unconverged:
        logger.warning("%d entropy points used an unconverged stationary distribution",
                       series.n_unconverged)
    return series


def write_entropy(path, series: EntropySeries, provenance: dict | None = None):
    frame = pd.DataFrame({"ts_s": series.ts_s, "h": series.h,
                          "defined": series.defined.astype(np.int8),
                          "n_transitions": series.n_transitions})
    return write_frame(path, frame, provenance)


def read_entropy(path) -> EntropySeries:
    frame = read_frame(path, ENTROPY_COLUMNS, {"ts_s": np.int64, "h": np.float64,
                                               "defined": np.int8, "n_transitions": np.int64})
    h = frame["h"].to_numpy().copy()
    h[frame["defined"].to_numpy() == 0] = np.nan
    return EntropySeries(frame["ts_s"].to_numpy(), h, frame["n_transitions"].to_numpy(),
                         np.ones(len(frame), bool))


def dump_matrix(P: TransitionMatrix) -> str:
    """Debug dump: 15 rows of 15 probabilities, row-major."""
    return "\n".join(",".join(repr(float(p)) for p in row) for row in P.probs) + "\n"
