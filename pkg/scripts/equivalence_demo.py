#!/usr/bin/env python3
"""Show speculative decoding emitting exactly the sequential token stream.

Builds a toy model, decodes the same prompts sequentially and with several
verification widths, and reports acceptance lengths alongside an exact
output comparison.
"""

import argparse
import time

import numpy as np

from specdec.config import PRESETS
from specdec.container import gen_toy_model
from specdec.decoding import OracleDrafter, generate_sequential, generate_speculative
from specdec.model import Engine
from specdec.tuner import HeadAccuracyTable, greedy_tree


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prompts", type=int, default=5)
    ap.add_argument("--tokens", type=int, default=48)
    ap.add_argument("--oracle-acc", type=float, default=0.0,
                    help="if > 0, use an oracle drafter with this rank-0 hit rate")
    args = ap.parse_args()

    config = PRESETS[args.preset]
    engine = Engine(gen_toy_model(args.seed, config), config)
    table = HeadAccuracyTable(acc=[[0.3, 0.2, 0.1]] * config.n_draft_heads)
    rng = np.random.default_rng(args.seed)

    print(f"{'prompt':>6} {'width':>6} {'match':>6} {'accept':>7} {'tok/s':>8}")
    for p in range(args.prompts):
        prompt = [int(t) for t in rng.integers(0, 250, size=8)]
        t0 = time.perf_counter()
        seq, _ = generate_sequential(engine, prompt, args.tokens)
        seq_rate = len(seq) / (time.perf_counter() - t0)
        print(f"{p:>6} {'seq':>6} {'-':>6} {1.0:>7.3f} {seq_rate:>8.1f}")
        for width in (2, 4, 8, 16):
            tree = greedy_tree(table, width)
            drafter = None
            if args.oracle_acc > 0:
                truth = list(prompt) + seq
                drafter = OracleDrafter(
                    truth, [[args.oracle_acc]] * config.n_draft_heads,
                    config.vocab_size, seed=p,
                )
            t0 = time.perf_counter()
            res = generate_speculative(engine, prompt, args.tokens, tree,
                                       drafter=drafter)
            rate = len(res.tokens) / (time.perf_counter() - t0)
            match = "yes" if res.tokens == seq else "NO!"
            print(f"{p:>6} {width:>6} {match:>6} "
                  f"{res.record.acceptance_length:>7.3f} {rate:>8.1f}")


if __name__ == "__main__":
    main()
