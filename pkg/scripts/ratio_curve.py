#!/usr/bin/env python3
"""Step latency as a function of the partition ratio.

Maps the contention landscape the ratio tuner hill-climbs over, for a
symmetric unit pair and for one with a throttled unit 0.  Useful for
eyeballing how noisy a given host is before trusting tuning runs.
"""

import argparse

from specdec.config import PRESETS
from specdec.container import gen_toy_model
from specdec.runtime import (
    ParallelEngine,
    VirtualUnit,
    measure_step_latency,
    plan_from_ratio,
)
from specdec.sparse_attn import build_mask
from specdec.tree import balanced_tree


def curve(engine, config, width, bucket, reps, label):
    tree = balanced_tree(width, config.n_draft_heads)
    pair_total = build_mask(tree).n_pairs
    print(f"\n{label}: width={width} context={bucket}")
    print(f"{'ratio':>8} {'median ms':>10} {'p10':>8} {'p90':>8}")
    for i in range(9):
        ratio = i / 8.0
        plan = plan_from_ratio(config, ratio, bucket, width=width,
                               pair_total=pair_total, units=engine.units)
        stats = measure_step_latency(engine, plan, width, bucket, reps=reps, tree=tree)
        print(f"{ratio:>8.3f} {stats.median * 1e3:>10.2f} "
              f"{stats.p10 * 1e3:>8.2f} {stats.p90 * 1e3:>8.2f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--bucket", type=int, default=256)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--throttle", type=float, default=3.0)
    args = ap.parse_args()

    config = PRESETS[args.preset]
    weights = gen_toy_model(0, config)

    symmetric = ParallelEngine(weights, config, (VirtualUnit(0), VirtualUnit(1)))
    curve(symmetric, config, args.width, args.bucket, args.reps, "symmetric units")

    throttled = ParallelEngine(
        weights, config, (VirtualUnit(0, throttle=args.throttle), VirtualUnit(1))
    )
    curve(throttled, config, args.width, args.bucket, args.reps,
          f"unit 0 throttled {args.throttle}x")


if __name__ == "__main__":
    main()
