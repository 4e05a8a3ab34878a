#!/usr/bin/env python3
"""Acceptance length vs verification width vs throughput, desk scale.

With a planted-accuracy oracle drafter the acceptance length follows the
closed-form estimator, while step latency grows with width; the product of
the two has an interior optimum, which is the whole point of sweeping
widths offline.
"""

import argparse
import time

import numpy as np

from specdec.config import PRESETS
from specdec.container import gen_toy_model
from specdec.decoding import OracleDrafter, generate_sequential, generate_speculative
from specdec.model import Engine
from specdec.tuner import HeadAccuracyTable, expected_acceptance, greedy_tree


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--tokens", type=int, default=96)
    ap.add_argument("--acc", type=float, default=0.7)
    ap.add_argument("--rank1-acc", type=float, default=0.15)
    args = ap.parse_args()

    config = PRESETS[args.preset]
    engine = Engine(gen_toy_model(args.seed, config), config)
    table = HeadAccuracyTable(
        acc=[[args.acc, args.rank1_acc]] * config.n_draft_heads
    )
    rng = np.random.default_rng(args.seed)
    prompt = [int(t) for t in rng.integers(0, 250, size=8)]

    truth, _ = generate_sequential(engine, prompt, args.tokens + config.n_draft_heads + 1)
    full_truth = list(prompt) + truth
    t0 = time.perf_counter()
    generate_sequential(engine, prompt, args.tokens)
    seq_rate = args.tokens / (time.perf_counter() - t0)
    print(f"sequential baseline: {seq_rate:.1f} tok/s")
    print(f"{'width':>6} {'est.accept':>10} {'accept':>8} {'tok/s':>8} {'speedup':>8}")

    best = (0.0, None)
    for width in (2, 4, 8, 16, 32):
        try:
            tree = greedy_tree(table, width)
        except Exception:
            print(f"{width:>6} {'(not expressible)':>10}")
            continue
        drafter = OracleDrafter(full_truth, table.acc, config.vocab_size, seed=width)
        t0 = time.perf_counter()
        res = generate_speculative(engine, prompt, args.tokens, tree, drafter=drafter)
        rate = len(res.tokens) / (time.perf_counter() - t0)
        est = expected_acceptance(tree, table)
        print(f"{width:>6} {est:>10.3f} {res.record.acceptance_length:>8.3f} "
              f"{rate:>8.1f} {rate / seq_rate:>8.2f}x")
        if rate > best[0]:
            best = (rate, width)
    print(f"best width on this host: {best[1]} ({best[0] / seq_rate:.2f}x)")


if __name__ == "__main__":
    main()
