"""Recompute the published summary numbers from their reported inputs."""

from flowentropy.backtest import BacktestResult, CostModel, pool_folds
from flowentropy.validate import binomial_direction, placebo_z

# trades, wins, net PnL (bps) per walk-forward fold
FOLDS = [(32, 23, 179.9), (27, 9, 212.9), (77, 34, 433.2), (12, 5, 66.5), (92, 37, 233.1)]

pooled = pool_folds([BacktestResult.from_summary(n, w, pnl, window=(10 * k, 10 * k + 5))
                     for k, (n, w, pnl) in enumerate(FOLDS)])
print(f"pooled: {pooled.n} trades, win rate {pooled.win_rate:.1%}, "
      f"PnL {pooled.total_net_bps:.1f} bps")

b = binomial_direction(108, 240)
print(f"108/240 hits: z = {b.z:.3f}, normal p = {b.p:.3f}, exact p = {b.p_exact:.3f}")

z, _ = placebo_z(2.17, 1.02, 0.08)
print(f"label-permutation z from (2.17, 1.02, 0.08): {z:.2f}")

z, _ = placebo_z(1125.6, 137.0, 201.0)
print(f"random-entry z from (1125.6, 137, 201): {z:.2f}")

c = CostModel()
print(f"round trip cost: 2 x {c.half_spread_bps} + {c.slippage_bps} + {c.fees_bps} = "
      f"{c.round_trip_bps:.2f} bps")
