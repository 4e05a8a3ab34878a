"""Command-line entry points.

Exit codes: 0 success, 2 usage error (argparse), 3 unreadable or malformed
file, 4 artifact/model shape mismatch, 5 context capacity exceeded.
Timing numbers go to stderr or into the JSON report, never into the
deterministic stdout stream.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .config import PRESETS, ModelConfig
from .container import ByteTokenizer, gen_toy_model, load_model, save_model
from .decoding import generate_sequential, generate_speculative
from .errors import (
    CapacityError,
    ConfigMismatchError,
    ContainerError,
    ContractViolationError,
    InvalidTableError,
)
from .model import Engine
from .runtime import DEFAULT_UNITS, ParallelEngine, VirtualUnit
from .tree import sequential_tree
from .tuner import (
    HeadAccuracyTable,
    Strategy,
    calibrate_heads,
    expected_acceptance,
    greedy_tree,
    refine_tree,
    simulate_evaluator,
    sweep_widths,
)

EXIT_IO = 3
EXIT_MISMATCH = 4
EXIT_CAPACITY = 5


def parse_units(spec: str) -> tuple[VirtualUnit, ...]:
    """Parse `u0:workers=4,throttle=1;u1:workers=2,throttle=3`."""
    units = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        name, _, fields = part.partition(":")
        if not name.startswith("u"):
            raise ContractViolationError(f"unit name {name!r} must look like u0")
        uid = int(name[1:])
        workers, throttle = 1, 1.0
        for kv in fields.split(","):
            if not kv:
                continue
            key, _, val = kv.partition("=")
            if key == "workers":
                workers = int(val)
            elif key == "throttle":
                throttle = float(val)
            else:
                raise ContractViolationError(f"unknown unit field {key!r}")
        units.append(VirtualUnit(id=uid, worker_count=workers, throttle=throttle))
    if not units:
        raise ContractViolationError("empty units spec")
    units.sort(key=lambda u: u.id)
    return tuple(units)


def _load_prompts(path: str) -> list[str]:
    prompts = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            prompts.append(json.loads(line)["prompt"])
    if not prompts:
        raise ContractViolationError(f"no prompts in {path}")
    return prompts


def _build_engine(model_path: str, units: tuple[VirtualUnit, ...] | None,
                  strategy: Strategy | None):
    config, weights = load_model(model_path)
    if units is None or len(units) < 2:
        return config, Engine(weights, config)
    plans = strategy.plans if strategy is not None else None
    return config, ParallelEngine(weights, config, units, plans=plans)


def cmd_gen_model(args) -> int:
    config = PRESETS[args.preset]
    weights = gen_toy_model(args.seed, config)
    save_model(args.out, config, weights)
    print(f"wrote {args.out} (preset {args.preset}, seed {args.seed})")
    return 0


def cmd_decode(args) -> int:
    tok = ByteTokenizer()
    units = parse_units(args.units) if args.units else None
    strategy = None
    if args.strategy:
        with open(args.strategy) as f:
            strategy = Strategy.from_json(f.read())
    config, engine = _build_engine(args.model, units, strategy)
    if tok.vocab_size != config.vocab_size:
        raise ConfigMismatchError(
            f"byte tokenizer needs vocab {tok.vocab_size}, model has {config.vocab_size}"
        )
    prompt = tok.encode(args.prompt)
    if not prompt:
        raise ContractViolationError("empty prompt")

    t0 = time.perf_counter()
    if args.seq:
        tokens, _ = generate_sequential(engine, prompt, args.max_tokens,
                                        stop_token=tok.eos_id)
        acceptance = 1.0
    else:
        if strategy is not None:
            tree = strategy.tree
        elif args.width == 1:
            tree = sequential_tree()
        else:
            table = _default_table(config)
            tree = greedy_tree(table, args.width)
        result = generate_speculative(engine, prompt, args.max_tokens, tree,
                                      stop_token=tok.eos_id)
        tokens, acceptance = result.tokens, result.record.acceptance_length
    elapsed = time.perf_counter() - t0

    print(tok.decode(tokens))
    print(f"acceptance_length: {acceptance:.4f}")
    print(f"tokens_per_s: {len(tokens) / elapsed:.1f}", file=sys.stderr)
    return 0


def _default_table(config: ModelConfig) -> HeadAccuracyTable:
    # geometric placeholder: lets --width build a tree without calibration
    acc = np.array(
        [[0.5 ** (h + 1) * 0.5 ** r for r in range(4)]
         for h in range(config.n_draft_heads)]
    )
    return HeadAccuracyTable(acc=acc)


def cmd_calibrate(args) -> int:
    config, weights = load_model(args.model)
    engine = Engine(weights, config)
    tok = ByteTokenizer()
    prompts = [tok.encode(p) for p in _load_prompts(args.calib)]
    table = calibrate_heads(engine, prompts, args.steps, args.k)
    with open(args.out, "w") as f:
        f.write(table.to_json())
    flag = "" if table.is_monotonic() else " (rank-monotonicity violations recorded)"
    print(f"wrote {args.out}{flag}")
    return 0


def cmd_tune_tree(args) -> int:
    with open(args.acc_table) as f:
        table = HeadAccuracyTable.from_json(f.read())
    tree = greedy_tree(table, args.width) if args.width > 1 else sequential_tree()
    if args.refine_budget > 0 and args.width > 1:
        tree = refine_tree(tree, simulate_evaluator(table, steps=args.refine_steps),
                           budget=args.refine_budget)
    with open(args.out, "w") as f:
        f.write(tree.to_json())
    print(f"wrote {args.out} (width {tree.width}, "
          f"estimated acceptance {expected_acceptance(tree, table):.3f})")
    return 0


def cmd_profile(args) -> int:
    units = parse_units(args.units) if args.units else DEFAULT_UNITS
    config, weights = load_model(args.model)
    engine = ParallelEngine(weights, config, units)
    tok = ByteTokenizer()
    prompts = [tok.encode(p) for p in _load_prompts(args.calib)]
    table = calibrate_heads(engine.single, prompts, args.calib_steps, args.k)
    widths = tuple(int(w) for w in args.widths.split(","))
    buckets = tuple(int(b) for b in args.buckets.split(","))
    strategy = sweep_widths(
        engine, table, widths, context_bucket=min(buckets), buckets=buckets,
        tune_kwargs={"reps": args.reps},
    )
    with open(args.out, "w") as f:
        f.write(strategy.to_json(units))
    print(f"wrote {args.out} (width {strategy.width})")
    return 0


def cmd_bench(args) -> int:
    tok = ByteTokenizer()
    units = parse_units(args.units) if args.units else None
    with open(args.strategy) as f:
        strategy = Strategy.from_json(f.read())
    config, engine = _build_engine(args.model, units, strategy)
    prompt = tok.encode(args.prompt)
    latencies = []
    acceptance = 0.0
    tokens = []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        result = generate_speculative(engine, prompt, args.max_tokens, strategy.tree,
                                      stop_token=tok.eos_id)
        latencies.append(time.perf_counter() - t0)
        tokens = result.tokens
        acceptance = result.record.acceptance_length
    median = float(np.median(latencies))
    bucket = min(strategy.plans) if strategy.plans else 0
    chosen = next(
        (c for c in strategy.provenance.get("candidates", [])
         if c.get("width") == strategy.width),
        {},
    )
    report = {
        "width": strategy.width,
        "acceptance_length": acceptance,
        "median_latency_ms": median * 1000.0,
        "tokens_per_s": len(tokens) / median if median > 0 else 0.0,
        "ratio": chosen.get("ratio"),
        "units": args.units or "",
        "context_bucket": bucket,
        "n_tokens": len(tokens),
    }
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for key, val in report.items():
            print(f"{key}: {val}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specdec")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="write a deterministic toy model container")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_model)

    d = sub.add_parser("decode", help="generate text from a prompt")
    d.add_argument("--model", required=True)
    d.add_argument("--prompt", required=True)
    d.add_argument("--strategy")
    d.add_argument("--width", type=int, default=16)
    d.add_argument("--max-tokens", type=int, default=64)
    d.add_argument("--units")
    d.add_argument("--seq", action="store_true", help="force sequential decoding")
    d.set_defaults(fn=cmd_decode)

    c = sub.add_parser("calibrate", help="measure draft-head accuracies")
    c.add_argument("--model", required=True)
    c.add_argument("--calib", required=True, help="JSONL with prompt fields")
    c.add_argument("--k", type=int, default=4)
    c.add_argument("--steps", type=int, default=32)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_calibrate)

    t = sub.add_parser("tune-tree", help="build a verification tree from a table")
    t.add_argument("--acc-table", required=True)
    t.add_argument("--width", type=int, required=True)
    t.add_argument("--refine-budget", type=int, default=0)
    t.add_argument("--refine-steps", type=int, default=2000)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_tune_tree)

    pr = sub.add_parser("profile", help="run the full offline strategy search")
    pr.add_argument("--model", required=True)
    pr.add_argument("--widths", default="2,4,8,16,32,64")
    pr.add_argument("--calib", required=True)
    pr.add_argument("--calib-steps", type=int, default=24)
    pr.add_argument("--k", type=int, default=4)
    pr.add_argument("--buckets", default="256,1024")
    pr.add_argument("--units")
    pr.add_argument("--reps", type=int, default=5)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_profile)

    b = sub.add_parser("bench", help="measure decode throughput for a strategy")
    b.add_argument("--model", required=True)
    b.add_argument("--strategy", required=True)
    b.add_argument("--prompt", default="benchmark prompt")
    b.add_argument("--max-tokens", type=int, default=64)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--units")
    b.add_argument("--json", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContainerError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigMismatchError, InvalidTableError, ContractViolationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
