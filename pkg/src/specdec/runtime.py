"""Multi-unit execution of one transformer step over shared memory.

Worker "units" emulate heterogeneous processing units that share one
address space: every unit runs the same per-layer program against the same
arena buffers, computes only its slice of each stage, and rendezvouses at a
barrier before anyone reads what another unit wrote.  Column-split linears
make every activation directly consumable by the next stage, so a step
performs zero inter-unit activation copies; an allreduce-style reference
path exists only to let tests count the copies that design avoids.

Asymmetry between units is synthetic: a unit's ``throttle`` stretches each
of its stage times by sleeping, and ``worker_count`` bounds its intra-unit
thread fanout.  The shared-arena/zero-copy behavior is real.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import CapacityError, ConfigMismatchError, ContractViolationError
from .model import BlockResult, Engine, KVCache, ModelWeights
from .sparse_attn import (
    CooMask,
    PartialAttention,
    attend_dense_prefix,
    attend_sparse_block,
    merge_partials,
)
from .tensor_ops import gemm, gemm_worker_chunk, rmsnorm, rope, silu

LINEAR_KINDS = ("qkv", "wo", "gate_up", "down", "lm_head")


@dataclass(frozen=True)
class VirtualUnit:
    id: int
    worker_count: int = 1
    throttle: float = 1.0

    def __post_init__(self):
        if self.worker_count < 1:
            raise ContractViolationError("worker_count must be >= 1")
        if self.throttle < 1.0:
            raise ContractViolationError("throttle must be >= 1")

    @property
    def parallelism_score(self) -> float:
        return self.worker_count / self.throttle


DEFAULT_UNITS = (VirtualUnit(0), VirtualUnit(1))


@dataclass
class TrafficCounters:
    activation_copies: int = 0     # inter-unit activation copies (column-split: always 0)
    allreduce_roundtrips: int = 0  # full-activation combine steps in the reference path
    barrier_waits: int = 0         # rendezvous count per step program

    def reset(self):
        self.activation_copies = 0
        self.allreduce_roundtrips = 0
        self.barrier_waits = 0


@dataclass(frozen=True)
class HeadAssignment:
    """How one attention head's work is divided between units.

    prefix_ranges[u] is the half-open slice of cache rows unit u attends
    densely; pair_ranges[u] the slice of the mask's pair list it handles.
    boundary_pairs records how many leading pairs (the denser left edge of
    the sparse region) were deliberately given to the dense-priority unit.
    """

    prefix_ranges: tuple[tuple[int, int], ...]
    pair_ranges: tuple[tuple[int, int], ...]
    boundary_pairs: int = 0

    def validate(self, bucket: int, pair_total: int):
        for name, ranges, total in (
            ("prefix", self.prefix_ranges, bucket),
            ("pair", self.pair_ranges, pair_total),
        ):
            spans = sorted(r for r in ranges)
            covered = 0
            for lo, hi in spans:
                if not 0 <= lo <= hi <= total:
                    raise ConfigMismatchError(f"{name} range [{lo},{hi}) out of [0,{total})")
                if lo < covered:
                    raise ConfigMismatchError(f"{name} ranges overlap")
                if lo > covered:
                    raise ConfigMismatchError(f"{name} ranges leave a gap at {covered}")
                covered = hi
            if covered != total:
                raise ConfigMismatchError(f"{name} ranges cover {covered} of {total}")


@dataclass(frozen=True)
class PartitionPlan:
    """Per-linear column cuts and per-head attention assignments.

    linear_cuts[kind] has n_units + 1 entries; unit u owns columns
    [cuts[u], cuts[u+1]).  All transformer layers share the same cuts.
    Attention ranges are stated for `context_bucket` cache rows and
    `pair_total` mask pairs, and are rescaled proportionally at execution.
    """

    linear_cuts: dict[str, tuple[int, ...]]
    heads: dict[int, HeadAssignment]
    context_bucket: int
    pair_total: int
    n_units: int = 2

    def cut(self, kind: str, unit: int) -> tuple[int, int]:
        c = self.linear_cuts[kind]
        return c[unit], c[unit + 1]

    def validate(self, config: ModelConfig):
        dims = {
            "qkv": config.d_model,
            "wo": config.d_model,
            "gate_up": config.d_ff,
            "down": config.d_model,
            "lm_head": config.vocab_size,
        }
        for kind, out_dim in dims.items():
            cuts = self.linear_cuts.get(kind)
            if cuts is None:
                raise ConfigMismatchError(f"plan missing cuts for {kind}")
            if len(cuts) != self.n_units + 1 or cuts[0] != 0 or cuts[-1] != out_dim:
                raise ConfigMismatchError(f"{kind} cuts {cuts} must span [0,{out_dim}]")
            if any(a > b for a, b in zip(cuts, cuts[1:])):
                raise ConfigMismatchError(f"{kind} cuts {cuts} not monotone")
        for c in self.linear_cuts["qkv"]:
            if c % config.d_head != 0:
                raise ConfigMismatchError("qkv cuts must align to head boundaries")
        if set(self.heads) != set(range(config.n_heads)):
            raise ConfigMismatchError("plan must assign every attention head")
        for ha in self.heads.values():
            if len(ha.prefix_ranges) != self.n_units or len(ha.pair_ranges) != self.n_units:
                raise ConfigMismatchError("head assignment unit count mismatch")
            ha.validate(self.context_bucket, self.pair_total)

    def owned_heads(self, unit: int, config: ModelConfig) -> list[int]:
        lo, hi = self.cut("qkv", unit)
        return list(range(lo // config.d_head, hi // config.d_head))


def _scale_range(rng: tuple[int, int], total: int, actual: int) -> tuple[int, int]:
    if total == 0:
        return (0, 0)
    lo = round(rng[0] * actual / total)
    hi = round(rng[1] * actual / total)
    return (min(lo, actual), min(hi, actual))


def plan_from_ratio(
    config: ModelConfig,
    ratio: float,
    context_bucket: int,
    *,
    width: int = 16,
    pair_total: int | None = None,
    units: tuple[VirtualUnit, ...] = DEFAULT_UNITS,
) -> PartitionPlan:
    """Two-unit plan giving unit 0 about `ratio` of every stage's work.

    Linear outputs split at floor(ratio * out_dim) columns (head-granule for
    the QKV projections).  Attention work is counted as score entries:
    dense rows are worth `width` each, sparse pairs one each.  The dense
    prefix goes first to the higher-parallelism unit, sparse pairs first to
    the lower-parallelism one; whatever sparse work the dense unit must
    absorb for balance is taken from the leading (boundary) pairs.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractViolationError(f"ratio {ratio} outside [0,1]")
    if len(units) != 2:
        raise ContractViolationError("plan_from_ratio supports exactly two units")
    if pair_total is None:
        pair_total = 2 * width
    heads0 = round(ratio * config.n_heads)
    cuts = {
        "qkv": (0, heads0 * config.d_head, config.d_model),
        "wo": (0, int(ratio * config.d_model), config.d_model),
        "gate_up": (0, int(ratio * config.d_ff), config.d_ff),
        "down": (0, int(ratio * config.d_model), config.d_model),
        "lm_head": (0, int(ratio * config.vocab_size), config.vocab_size),
    }

    # dense-priority unit = higher parallelism score (ties favor unit 0)
    if units[1].parallelism_score > units[0].parallelism_score:
        dense_unit = 1
    else:
        dense_unit = 0
    dense_work = context_bucket * width
    total = dense_work + pair_total
    target_dense_unit = (ratio if dense_unit == 0 else 1.0 - ratio) * total
    rows_d = min(context_bucket, int(round(min(target_dense_unit, dense_work) / max(width, 1))))
    boundary = int(round(target_dense_unit - rows_d * width))
    boundary = max(0, min(pair_total, boundary))

    if dense_unit == 0:
        prefix_ranges = ((0, rows_d), (rows_d, context_bucket))
        pair_ranges = ((0, boundary), (boundary, pair_total))
    else:
        prefix_ranges = ((rows_d, context_bucket), (0, rows_d))
        pair_ranges = ((boundary, pair_total), (0, boundary))
    ha = HeadAssignment(
        prefix_ranges=prefix_ranges, pair_ranges=pair_ranges, boundary_pairs=boundary
    )
    plan = PartitionPlan(
        linear_cuts=cuts,
        heads={h: ha for h in range(config.n_heads)},
        context_bucket=context_bucket,
        pair_total=pair_total,
        n_units=2,
    )
    plan.validate(config)
    return plan


def single_unit_plan(config: ModelConfig, context_bucket: int, *, width: int = 16,
                     pair_total: int | None = None) -> PartitionPlan:
    return plan_from_ratio(config, 1.0, context_bucket, width=width, pair_total=pair_total)


def plan_to_json(plan: PartitionPlan, units: tuple[VirtualUnit, ...]) -> str:
    return json.dumps(
        {
            "context_bucket": plan.context_bucket,
            "pair_total": plan.pair_total,
            "n_units": plan.n_units,
            "linear_cuts": {k: list(v) for k, v in plan.linear_cuts.items()},
            "heads": {
                str(h): {
                    "prefix_ranges": [list(r) for r in ha.prefix_ranges],
                    "pair_ranges": [list(r) for r in ha.pair_ranges],
                    "boundary_pairs": ha.boundary_pairs,
                }
                for h, ha in plan.heads.items()
            },
            "units": [
                {"id": u.id, "workers": u.worker_count, "throttle": u.throttle}
                for u in units
            ],
        },
        indent=2,
    )


def plan_from_json(text: str) -> tuple[PartitionPlan, tuple[VirtualUnit, ...]]:
    data = json.loads(text)
    heads = {
        int(h): HeadAssignment(
            prefix_ranges=tuple(tuple(r) for r in ha["prefix_ranges"]),
            pair_ranges=tuple(tuple(r) for r in ha["pair_ranges"]),
            boundary_pairs=int(ha.get("boundary_pairs", 0)),
        )
        for h, ha in data["heads"].items()
    }
    plan = PartitionPlan(
        linear_cuts={k: tuple(v) for k, v in data["linear_cuts"].items()},
        heads=heads,
        context_bucket=int(data["context_bucket"]),
        pair_total=int(data["pair_total"]),
        n_units=int(data["n_units"]),
    )
    units = tuple(
        VirtualUnit(id=int(u["id"]), worker_count=int(u["workers"]), throttle=float(u["throttle"]))
        for u in data["units"]
    )
    return plan, units


class SharedArena:
    """Named full-width activation buffers with declared per-unit writers."""

    def __init__(self):
        self.regions: dict[str, np.ndarray] = {}
        self.writers: dict[str, list[tuple[int, int]]] = {}

    def alloc(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        buf = np.zeros(shape, dtype=np.float32)
        self.regions[name] = buf
        return buf

    def declare_writers(self, name: str, intervals: list[tuple[int, int]]):
        spans = sorted(i for i in intervals if i[0] < i[1])
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ContractViolationError(f"writers of region {name} overlap")
        self.writers[name] = intervals


class _NullBarrier:
    """Test hook: stands in for the step barrier when races are being provoked."""

    def wait(self):
        return 0


def _split_chunks(lo: int, hi: int, parts: int) -> list[tuple[int, int]]:
    size = hi - lo
    if size <= 0:
        return []
    parts = min(parts, size)
    step = size // parts
    extra = size % parts
    out, cur = [], lo
    for i in range(parts):
        nxt = cur + step + (1 if i < extra else 0)
        out.append((cur, nxt))
        cur = nxt
    return out


class _UnitRunner:
    """Executes one unit's share of a stage, with throttling and fanout."""

    def __init__(self, unit: VirtualUnit, pool: ThreadPoolExecutor | None,
                 delays: dict | None, use_chunks: bool = True):
        self.unit = unit
        self.pool = pool
        self.delays = delays or {}
        self.use_chunks = use_chunks

    def stage(self, label: str, fn):
        time.sleep(self.delays.get((self.unit.id, label), 0.0))
        t0 = time.perf_counter()
        fn()
        elapsed = time.perf_counter() - t0
        if self.unit.throttle > 1.0:
            # deadline spin with yields: time.sleep() overshoots sub-ms waits
            # far too much to emulate a proportional slowdown
            deadline = time.perf_counter() + elapsed * (self.unit.throttle - 1.0)
            while time.perf_counter() < deadline:
                time.sleep(0)

    def run_gemm(self, src: np.ndarray, weight: np.ndarray, dst: np.ndarray,
                 cols: tuple[int, int]):
        lo, hi = cols
        if hi <= lo:
            return
        kc = gemm_worker_chunk(src.shape[0], hi - lo) if self.use_chunks else None
        chunks = _split_chunks(lo, hi, self.unit.worker_count)
        if len(chunks) == 1 or self.pool is None:
            for c0, c1 in chunks:
                dst[:, c0:c1] = gemm(src, weight, (c0, c1), k_chunk=kc)
            return
        futures = [
            self.pool.submit(lambda c0=c0, c1=c1: dst.__setitem__(
                (slice(None), slice(c0, c1)), gemm(src, weight, (c0, c1), k_chunk=kc)))
            for c0, c1 in chunks[1:]
        ]
        c0, c1 = chunks[0]
        dst[:, c0:c1] = gemm(src, weight, (c0, c1), k_chunk=kc)
        for f in futures:
            f.result()


def execute_step(
    weights: ModelWeights,
    config: ModelConfig,
    cache: KVCache,
    block_tokens,
    block_positions,
    mask: CooMask,
    plan: PartitionPlan,
    units: tuple[VirtualUnit, ...] = DEFAULT_UNITS,
    *,
    counters: TrafficCounters | None = None,
    capture: dict | None = None,
    pools: dict[int, ThreadPoolExecutor] | None = None,
    disable_barriers: bool = False,
    stage_delays: dict | None = None,
) -> BlockResult:
    """Run one block forward across the units; equivalent to Engine.forward_block.

    Linear stages are bit-identical to a single-unit run on the same stage
    inputs (fixed-order column-split gemm); attention matches within merge
    rounding.  One barrier follows each linear stage and two bracket each
    attention merge.
    """
    plan.validate(config)
    if len(units) != plan.n_units:
        raise ConfigMismatchError(f"plan wants {plan.n_units} units, got {len(units)}")
    tokens = np.asarray(list(block_tokens))
    w = int(tokens.shape[0])
    if w < 1:
        raise ContractViolationError("execute_step: empty block")
    if mask.width != w:
        raise ConfigMismatchError(f"mask width {mask.width} != block width {w}")
    if cache.length + w > config.max_context:
        raise CapacityError("block would overflow max_context")
    positions = np.asarray(list(block_positions))
    if positions.shape != (w,):
        raise ContractViolationError("positions/block length mismatch")
    L = cache.length
    scale = 1.0 / np.sqrt(config.d_head)

    arena = SharedArena()
    x = arena.alloc("x", (w, config.d_model))
    x[:] = weights.embedding[tokens]
    x2 = arena.alloc("x2", (w, config.d_model))
    q = arena.alloc("q", (w, config.d_model))
    k = arena.alloc("k", (w, config.d_model))
    v = arena.alloc("v", (w, config.d_model))
    q_rot = arena.alloc("q_rot", (w, config.d_model))
    attn_merged = arena.alloc("attn", (w, config.d_model))
    gate = arena.alloc("gate", (w, config.d_ff))
    up = arena.alloc("up", (w, config.d_ff))
    hbuf = arena.alloc("h", (w, config.d_ff))
    logits = arena.alloc("logits", (w, config.vocab_size))
    hidden_out = arena.alloc("hidden", (w, config.d_model))
    shape_khd = (w, config.n_heads, config.d_head)
    staged_k = [np.zeros(shape_khd, dtype=np.float32) for _ in range(config.n_layers)]
    staged_v = [np.zeros(shape_khd, dtype=np.float32) for _ in range(config.n_layers)]
    for kind, region in (("qkv", "q"), ("wo", "x2"), ("gate_up", "gate"),
                         ("down", "x"), ("lm_head", "logits")):
        arena.declare_writers(region, [plan.cut(kind, u.id) for u in units])

    n_units = len(units)
    # parts[head][unit] -> (dense partial | None, sparse partial | None)
    dense_parts: list[list[PartialAttention | None]] = [
        [None] * n_units for _ in range(config.n_heads)
    ]
    sparse_parts: list[list[PartialAttention | None]] = [
        [None] * n_units for _ in range(config.n_heads)
    ]

    barrier = _NullBarrier() if disable_barriers else threading.Barrier(n_units)
    errors: list[BaseException] = []

    def _unit_has_work(u: int) -> bool:
        if any(plan.cut(kind, u)[1] > plan.cut(kind, u)[0] for kind in LINEAR_KINDS):
            return True
        return any(
            ha.prefix_ranges[u][1] > ha.prefix_ranges[u][0]
            or ha.pair_ranges[u][1] > ha.pair_ranges[u][0]
            for ha in plan.heads.values()
        )

    # with a single active unit there is no interpreter contention to dodge,
    # so the plain rank-1 gemm path is the faster identical-bits choice
    active_units = sum(1 for unit in units if _unit_has_work(unit.id))
    use_chunks = active_units > 1

    def unit_program(unit: VirtualUnit):
        runner = _UnitRunner(unit, (pools or {}).get(unit.id), stage_delays,
                             use_chunks=use_chunks)
        u = unit.id

        def sync():
            if counters is not None and u == 0:
                counters.barrier_waits += 1
            barrier.wait()
        my_heads = plan.owned_heads(u, config)
        hd = config.d_head
        x_in, x_mid = x, x2
        try:
            for li, lw in enumerate(weights.layers):
                normed_box = {}

                def s_qkv():
                    normed = rmsnorm(x_in, lw.attn_norm_g)
                    normed_box["v"] = normed
                    cols = plan.cut("qkv", u)
                    runner.run_gemm(normed, lw.wq, q, cols)
                    runner.run_gemm(normed, lw.wk, k, cols)
                    runner.run_gemm(normed, lw.wv, v, cols)
                    for h in my_heads:
                        hs = h * hd
                        q_rot[:, hs:hs + hd] = rope(q[:, hs:hs + hd], positions, config.rope_base)
                        staged_k[li][:, h] = rope(k[:, hs:hs + hd], positions, config.rope_base)
                        staged_v[li][:, h] = v[:, hs:hs + hd]

                runner.stage("qkv", s_qkv)
                sync()
                if capture is not None and u == 0:
                    capture[f"L{li}.qkv"] = {
                        "in": normed_box["v"].copy(),
                        "out": np.concatenate([q, k, v], axis=1),
                        "residual": None,
                    }

                def s_attn_partials():
                    for h in range(config.n_heads):
                        ha = plan.heads[h]
                        hs = h * hd
                        qh = q_rot[:, hs:hs + hd]
                        pr = _scale_range(ha.prefix_ranges[u], plan.context_bucket, L)
                        if pr[1] > pr[0]:
                            dense_parts[h][u] = attend_dense_prefix(
                                qh, cache.k[li][:, h], cache.v[li][:, h], pr, scale
                            )
                        else:
                            dense_parts[h][u] = None
                        sp = _scale_range(ha.pair_ranges[u], plan.pair_total, mask.n_pairs)
                        if sp[1] > sp[0]:
                            sparse_parts[h][u] = attend_sparse_block(
                                qh, staged_k[li][:, h], staged_v[li][:, h],
                                mask, scale, pair_range=sp,
                            )
                        else:
                            sparse_parts[h][u] = None

                runner.stage("attn_partials", s_attn_partials)
                sync()

                def s_merge():
                    for h in my_heads:
                        parts = [p for p in dense_parts[h] if p is not None]
                        parts += [p for p in sparse_parts[h] if p is not None]
                        hs = h * hd
                        attn_merged[:, hs:hs + hd] = merge_partials(parts)

                runner.stage("merge", s_merge)
                sync()

                def s_wo():
                    lo, hi = plan.cut("wo", u)
                    if hi > lo:
                        runner.run_gemm(attn_merged, lw.wo, x_mid, (lo, hi))
                        x_mid[:, lo:hi] += x_in[:, lo:hi]

                runner.stage("wo", s_wo)
                sync()
                if capture is not None and u == 0:
                    capture[f"L{li}.wo"] = {
                        "in": attn_merged.copy(), "out": x_mid.copy(), "residual": x_in.copy(),
                    }

                def s_gate_up():
                    normed2 = rmsnorm(x_mid, lw.mlp_norm_g)
                    normed_box["v2"] = normed2
                    cols = plan.cut("gate_up", u)
                    runner.run_gemm(normed2, lw.w_gate, gate, cols)
                    runner.run_gemm(normed2, lw.w_up, up, cols)
                    lo, hi = cols
                    if hi > lo:
                        hbuf[:, lo:hi] = silu(gate[:, lo:hi]) * up[:, lo:hi]

                runner.stage("gate_up", s_gate_up)
                sync()
                if capture is not None and u == 0:
                    capture[f"L{li}.gate_up"] = {
                        "in": normed_box["v2"].copy(),
                        "out": np.concatenate([gate, up], axis=1),
                        "residual": None,
                    }

                def s_down():
                    lo, hi = plan.cut("down", u)
                    if hi > lo:
                        runner.run_gemm(hbuf, lw.w_down, x_in, (lo, hi))
                        x_in[:, lo:hi] += x_mid[:, lo:hi]

                runner.stage("down", s_down)
                sync()
                if capture is not None and u == 0:
                    capture[f"L{li}.down"] = {
                        "in": hbuf.copy(), "out": x_in.copy(), "residual": x_mid.copy(),
                    }

            def s_lm():
                hidden = rmsnorm(x_in, weights.final_norm_g)
                if u == 0:
                    hidden_out[:] = hidden
                runner.run_gemm(hidden, weights.lm_head, logits, plan.cut("lm_head", u))

            runner.stage("lm_head", s_lm)
            sync()
            if capture is not None and u == 0:
                capture["lm_head"] = {
                    "in": hidden_out.copy(), "out": logits.copy(), "residual": None,
                }
        except BaseException as exc:  # noqa: BLE001 - propagate to caller
            errors.append(exc)
            if hasattr(barrier, "abort"):
                barrier.abort()

    threads = [threading.Thread(target=unit_program, args=(unit,), daemon=True)
               for unit in units]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # prefer the root cause over the broken-barrier fallout it triggers
        for exc in errors:
            if not isinstance(exc, threading.BrokenBarrierError):
                raise exc
        raise errors[0]
    return BlockResult(
        logits=logits, hidden=hidden_out, staged_k=staged_k, staged_v=staged_v
    )


class ParallelEngine:
    """Engine facade that runs block forwards across virtual units.

    Prefill and drafting reuse the single-unit implementation; only the
    per-step block forward (the decode-dominant work) is distributed.
    """

    def __init__(
        self,
        weights: ModelWeights,
        config: ModelConfig,
        units: tuple[VirtualUnit, ...] = DEFAULT_UNITS,
        plan: PartitionPlan | None = None,
        plans: dict[int, PartitionPlan] | None = None,
    ):
        self.single = Engine(weights, config)
        self.units = tuple(units)
        self.plan = plan
        self.plans = dict(plans) if plans else {}
        self.counters = TrafficCounters()
        self._pools: dict[int, ThreadPoolExecutor] = {
            u.id: ThreadPoolExecutor(max_workers=u.worker_count)
            for u in self.units
            if u.worker_count > 1
        }

    @property
    def config(self) -> ModelConfig:
        return self.single.config

    @property
    def weights(self) -> ModelWeights:
        return self.single.weights

    def new_cache(self) -> KVCache:
        return self.single.new_cache()

    def prefill(self, prompt_tokens):
        return self.single.prefill(prompt_tokens)

    def draft(self, hidden, k: int):
        return self.single.draft(hidden, k)

    def _step_single(self, cache: KVCache, token: int):
        return self.single._step_single(cache, token)

    def plan_for(self, cache_len: int, width: int | None = None) -> PartitionPlan:
        if self.plans:
            eligible = [b for b in self.plans if b <= cache_len]
            bucket = max(eligible) if eligible else min(self.plans)
            return self.plans[bucket]
        if self.plan is not None:
            return self.plan
        return single_unit_plan(self.config, max(cache_len, 1), width=width or 16)

    def forward_block(self, cache, block_tokens, block_positions, mask,
                      capture=None, plan=None):
        plan = plan or self.plan_for(cache.length)
        return execute_step(
            self.weights, self.config, cache, block_tokens, block_positions,
            mask, plan, self.units, counters=self.counters, capture=capture,
            pools=self._pools or None,
        )

    def close(self):
        for pool in self._pools.values():
            pool.shutdown(wait=False)


@dataclass
class LatencyStats:
    median: float
    p10: float
    p90: float
    samples: list[float] = field(default_factory=list)


def _synthetic_state(config: ModelConfig, width: int, context_len: int, seed: int = 0):
    """Random cache contents and block tokens for latency measurement."""
    rng = np.random.default_rng(seed)
    cache = KVCache(config)
    if context_len > config.max_context - width:
        raise ContractViolationError("context bucket too large for max_context")
    for layer in range(config.n_layers):
        cache.k[layer][:context_len] = rng.standard_normal(
            (context_len, config.n_heads, config.d_head)).astype(np.float32)
        cache.v[layer][:context_len] = rng.standard_normal(
            (context_len, config.n_heads, config.d_head)).astype(np.float32)
    cache.length = context_len
    tokens = [int(t) for t in rng.integers(0, config.vocab_size, size=width)]
    return cache, tokens


def measure_step_latency(
    engine: ParallelEngine,
    plan: PartitionPlan,
    width: int,
    context_bucket: int,
    reps: int = 5,
    *,
    tree=None,
    warmup: int = 2,
    seed: int = 0,
) -> LatencyStats:
    """Median/p10/p90 wall-clock time of execute_step on synthetic state."""
    from .sparse_attn import build_mask
    from .tree import balanced_tree

    if reps < 3:
        raise ContractViolationError("reps must be >= 3")
    if tree is None:
        tree = balanced_tree(width, engine.config.n_draft_heads)
    cache, tokens = _synthetic_state(engine.config, tree.width, context_bucket, seed)
    positions = [context_bucket + d for d in tree.depths()]
    mask = build_mask(tree)
    samples = []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        engine.forward_block(cache, tokens, positions, mask, plan=plan)
        dt = time.perf_counter() - t0
        if i >= warmup:
            samples.append(dt)
    arr = np.asarray(samples)
    return LatencyStats(
        median=float(np.median(arr)),
        p10=float(np.percentile(arr, 10)),
        p90=float(np.percentile(arr, 90)),
        samples=samples,
    )


def allreduce_reference_step(
    weights: ModelWeights,
    config: ModelConfig,
    cache: KVCache,
    block_tokens,
    block_positions,
    mask: CooMask,
    ratio: float = 0.5,
    counters: TrafficCounters | None = None,
) -> np.ndarray:
    """Megatron-style split (column then row + allreduce), traffic-accounted.

    Test-only reference: per pair of linears the row-split second layer
    produces full-width partial activations in per-unit private buffers
    that must be read back and combined - exactly the memory round-trip the
    column-split path avoids.  Runs sequentially; only the copy accounting
    matters.
    """
    counters = counters if counters is not None else TrafficCounters()
    tokens = np.asarray(list(block_tokens))
    w = int(tokens.shape[0])
    positions = np.asarray(list(block_positions))
    L = cache.length
    scale = 1.0 / np.sqrt(config.d_head)
    heads0 = round(ratio * config.n_heads)
    ff0 = int(ratio * config.d_ff)

    def allreduce(partials: list[np.ndarray]) -> np.ndarray:
        # one full-activation combine: read every foreign partial, write the sum
        out = partials[0].copy()
        for p in partials[1:]:
            out += p
            counters.activation_copies += 1
        counters.allreduce_roundtrips += 1
        return out

    x = weights.embedding[tokens].copy()
    for li, lw in enumerate(weights.layers):
        normed = rmsnorm(x, lw.attn_norm_g)
        head_splits = ((0, heads0), (heads0, config.n_heads))
        partials = []
        for h0, h1 in head_splits:
            if h1 <= h0:
                continue
            cols = (h0 * config.d_head, h1 * config.d_head)
            qs = gemm(normed, lw.wq, cols)
            ks = gemm(normed, lw.wk, cols)
            vs = gemm(normed, lw.wv, cols)
            attn_local = np.zeros((w, h1 * config.d_head - h0 * config.d_head), np.float32)
            for h in range(h0, h1):
                o = h * config.d_head - h0 * config.d_head
                qh = rope(qs[:, o:o + config.d_head], positions, config.rope_base)
                kh = rope(ks[:, o:o + config.d_head], positions, config.rope_base)
                vh = vs[:, o:o + config.d_head]
                parts = [
                    attend_dense_prefix(qh, cache.k[li][:, h], cache.v[li][:, h], (0, L), scale),
                    attend_sparse_block(qh, kh, vh, mask, scale),
                ]
                attn_local[:, o:o + config.d_head] = merge_partials(parts)
            # row-split Wo: rows of the weight matching this unit's head columns
            partials.append(gemm(attn_local, lw.wo[cols[0]:cols[1], :]))
        x = x + allreduce(partials)
        normed2 = rmsnorm(x, lw.mlp_norm_g)
        partials = []
        for f0, f1 in ((0, ff0), (ff0, config.d_ff)):
            if f1 <= f0:
                continue
            g = gemm(normed2, lw.w_gate, (f0, f1))
            uu = gemm(normed2, lw.w_up, (f0, f1))
            partials.append(gemm(silu(g) * uu, lw.w_down[f0:f1, :]))
        x = x + allreduce(partials)
    hidden = rmsnorm(x, weights.final_norm_g)
    return gemm(hidden, weights.lm_head)
