"""Offline strategy search: head calibration, tree construction, width
sweep, and contention-aware partition-ratio tuning.

The estimator treats draft heads as independent: a candidate chain's
acceptance probability is the product of its nodes' (head, rank) hit
rates, and a tree's expected acceptance length is one (the guaranteed
bonus token) plus the sum of those path products over all nodes.  Because
hit rates never exceed one, path products only shrink with depth, so
greedily taking the largest remaining product always yields an
ancestor-closed set - the estimator-optimal tree for its width.

Latency-side decisions never trust single measurements: ratio hill
climbing accepts a move only when the candidate's [p10, p90] band clears
the incumbent's entirely.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .decoding import generate_sequential
from .errors import ConfigMismatchError, ContractViolationError, InvalidTableError
from .runtime import (
    LatencyStats,
    ParallelEngine,
    PartitionPlan,
    measure_step_latency,
    plan_from_json,
    plan_from_ratio,
    plan_to_json,
)
from .sparse_attn import build_mask
from .tree import TreeNode, VerificationTree, sequential_tree


@dataclass
class HeadAccuracyTable:
    """acc[h][r]: probability head h+1's rank-r candidate is the greedy token."""

    acc: np.ndarray
    monotonic_violations: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.acc = np.asarray(self.acc, dtype=np.float64)
        if self.acc.ndim != 2:
            raise InvalidTableError("acc must be [n_heads, k]")
        if (self.acc < 0).any() or (self.acc > 1).any():
            raise InvalidTableError("acc entries must lie in [0,1]")
        if (self.acc.sum(axis=1) > 1.0 + 1e-9).any():
            raise InvalidTableError("acc rows must sum to <= 1")

    @property
    def n_heads(self) -> int:
        return self.acc.shape[0]

    @property
    def k(self) -> int:
        return self.acc.shape[1]

    def is_monotonic(self) -> bool:
        return not self.monotonic_violations and bool(
            (np.diff(self.acc, axis=1) <= 1e-12).all()
        )

    def to_json(self) -> str:
        return json.dumps({"acc": self.acc.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "HeadAccuracyTable":
        return cls(acc=json.loads(text)["acc"])


def calibrate_heads(
    engine,
    prompts,
    steps_per_prompt: int,
    k: int,
    draft_fn=None,
) -> HeadAccuracyTable:
    """Empirical (head, rank) hit rates against greedy decoding.

    For each decode step t, head h's rank-r candidate scores a hit when it
    equals the greedy token at step t+h.  Raw frequencies are returned
    as-is; rank-monotonicity violations are recorded on the table, not
    silently repaired.
    """
    prompts = list(prompts)
    if not prompts:
        raise ContractViolationError("calibrate_heads: empty calibration set")
    n_heads = engine.config.n_draft_heads
    draft_fn = draft_fn or (lambda hidden, position: engine.draft(hidden, k))
    hits = np.zeros((n_heads, k), dtype=np.float64)
    totals = np.zeros(n_heads, dtype=np.float64)
    for prompt in prompts:
        tokens, hiddens = generate_sequential(
            engine, prompt, steps_per_prompt, collect_hidden=True
        )
        # position of tokens[t] in the full sequence is len(prompt) + t
        for t in range(len(tokens)):
            cands = draft_fn(hiddens[t], len(prompt) + t)
            for h in range(n_heads):
                target = t + h + 1
                if target >= len(tokens):
                    continue
                totals[h] += 1
                row = cands.token_ids[h]
                for r in range(min(k, row.shape[0])):
                    if int(row[r]) == tokens[target]:
                        hits[h, r] += 1
                        break
    acc = np.divide(hits, totals[:, None], out=np.zeros_like(hits), where=totals[:, None] > 0)
    table = HeadAccuracyTable(acc=acc)
    diffs = np.diff(acc, axis=1)
    table.monotonic_violations = [
        (h, r + 1) for h, r in zip(*np.where(diffs > 1e-12))
    ]
    return table


def expected_acceptance(tree: VerificationTree, table: HeadAccuracyTable) -> float:
    """Closed-form acceptance length: 1 + sum over nodes of path products."""
    products = [1.0]  # per block index, root included
    total = 1.0
    for node in tree.nodes:
        if node.head > table.n_heads or node.rank >= table.k:
            raise ConfigMismatchError(
                f"tree node (head {node.head}, rank {node.rank}) outside "
                f"table {table.acc.shape}"
            )
        p = products[node.parent] * float(table.acc[node.head - 1, node.rank])
        products.append(p)
        total += p
    return total


def greedy_tree(table: HeadAccuracyTable, width: int) -> VerificationTree:
    """Estimator-optimal tree: grow by the largest remaining path product.

    Ties break toward (shallower depth, lower rank, earlier parent), which
    pins down a deterministic tree.
    """
    if width < 1:
        raise ContractViolationError("width must be >= 1")
    nodes: list[TreeNode] = []
    # heap entries: (-product, depth, rank, parent_index, product)
    frontier: list[tuple[float, int, int, int, float]] = []

    def push_children(parent_idx: int, parent_depth: int, parent_product: float):
        depth = parent_depth + 1
        if depth > table.n_heads:
            return
        for r in range(table.k):
            p = parent_product * float(table.acc[depth - 1, r])
            heapq.heappush(frontier, (-p, depth, r, parent_idx, p))

    push_children(0, 0, 1.0)
    depths = {0: 0}
    products = {0: 1.0}
    while len(nodes) + 1 < width:
        if not frontier:
            raise ConfigMismatchError(
                f"width {width} not expressible with {table.n_heads} heads x {table.k} ranks"
            )
        _, depth, rank, parent_idx, product = heapq.heappop(frontier)
        nodes.append(TreeNode(parent=parent_idx, head=depth, rank=rank))
        idx = len(nodes)
        depths[idx] = depth
        products[idx] = product
        push_children(idx, depth, product)
    return VerificationTree(tuple(nodes))


def _subtree_shape(tree: VerificationTree, root_idx: int) -> list[tuple[int, int]]:
    """Relative (parent position in this list, rank) pairs below root_idx."""
    children = tree.children()
    order = []
    pos = {root_idx: -1}
    stack = [root_idx]
    while stack:
        cur = stack.pop()
        for ch in sorted(children[cur]):
            order.append((pos[cur], tree.nodes[ch - 1].rank))
            pos[ch] = len(order) - 1
            stack.append(ch)
    return order


def _rebuild_with_shapes(
    tree: VerificationTree, swap_a: int, swap_b: int
) -> VerificationTree | None:
    """Exchange the subtrees hanging below two same-depth nodes."""
    depths = tree.depths()
    if depths[swap_a] != depths[swap_b]:
        return None
    shape_a = _subtree_shape(tree, swap_a)
    shape_b = _subtree_shape(tree, swap_b)
    if shape_a == shape_b:
        return None
    children = tree.children()
    drop = set()

    def collect(idx):
        for ch in children[idx]:
            drop.add(ch)
            collect(ch)

    collect(swap_a)
    collect(swap_b)
    keep = [i for i in range(tree.width) if i not in drop]
    remap = {old: new for new, old in enumerate(keep)}
    new_nodes = [
        TreeNode(parent=remap[tree.nodes[i - 1].parent], head=tree.nodes[i - 1].head,
                 rank=tree.nodes[i - 1].rank)
        for i in keep
        if i != 0
    ]

    def graft(anchor_old: int, shape: list[tuple[int, int]]):
        base = remap[anchor_old]
        local: list[int] = []
        for parent_pos, rank in shape:
            parent = base if parent_pos == -1 else local[parent_pos]
            parent_depth = 0
            # depth bookkeeping via recomputation below; head set after
            new_nodes.append(TreeNode(parent=parent, head=0, rank=rank))
            local.append(len(new_nodes))
        return local

    graft(swap_a, shape_b)
    graft(swap_b, shape_a)
    # recompute heads from parent depths (ordering may interleave, so fix up)
    try:
        ordered = _normalize_nodes(new_nodes)
        return VerificationTree(ordered)
    except ContractViolationError:
        return None


def _normalize_nodes(nodes: list[TreeNode]) -> tuple[TreeNode, ...]:
    """Topologically order nodes and recompute heads as depths."""
    n = len(nodes)
    depths = {0: 0}
    placed: dict[int, int] = {0: 0}
    remaining = {i + 1: node for i, node in enumerate(nodes)}
    out: list[TreeNode] = []
    while remaining:
        progressed = False
        for idx in sorted(remaining):
            node = remaining[idx]
            if node.parent in placed:
                depth = depths[placed[node.parent]] + 1
                out.append(TreeNode(parent=placed[node.parent], head=depth, rank=node.rank))
                placed[idx] = len(out)
                depths[len(out)] = depth
                del remaining[idx]
                progressed = True
                break
        if not progressed:
            raise ContractViolationError("cyclic tree nodes")
    return tuple(out)


def refine_tree(
    tree: VerificationTree,
    evaluator,
    budget: int,
    seed: int = 0,
) -> VerificationTree:
    """Local search over leaf reallocations and same-depth subtree exchanges.

    evaluator(tree) -> measured acceptance length.  The incumbent is
    replaced only on strict improvement; stops after `budget` evaluations.
    Moves the evaluator cannot score (rank outside its table) are skipped.
    """
    rng = np.random.default_rng(seed)
    best = tree
    best_score = evaluator(tree)
    evals = 0
    while evals < budget:
        moves = _leaf_swap_moves(best) + _subtree_exchange_moves(best)
        if not moves:
            break
        order = rng.permutation(len(moves))
        improved = False
        for mi in order:
            if evals >= budget:
                break
            candidate = moves[mi]
            try:
                score = evaluator(candidate)
            except ConfigMismatchError:
                continue
            evals += 1
            if score > best_score:
                best, best_score = candidate, score
                improved = True
                break
        if not improved:
            break
    return best


def _leaf_swap_moves(tree: VerificationTree) -> list[VerificationTree]:
    """Drop one leaf, graft an unused (parent, rank) candidate elsewhere."""
    children = tree.children()
    used = {(n.parent, n.rank) for n in tree.nodes}
    max_rank = max((n.rank for n in tree.nodes), default=0)
    moves = []
    for leaf in range(1, tree.width):
        if children[leaf]:
            continue
        old_slot = (tree.nodes[leaf - 1].parent, tree.nodes[leaf - 1].rank)
        keep = [i for i in range(tree.width) if i != leaf]
        remap = {old: new for new, old in enumerate(keep)}
        base_nodes = [
            TreeNode(parent=remap[tree.nodes[i - 1].parent],
                     head=tree.nodes[i - 1].head,
                     rank=tree.nodes[i - 1].rank)
            for i in keep if i != 0
        ]
        for parent in keep:
            for rank in range(max_rank + 2):
                if (parent, rank) in used and (parent, rank) != old_slot:
                    continue
                if (parent, rank) == old_slot:
                    continue  # no-op
                nodes = list(base_nodes)
                nodes.append(TreeNode(parent=remap[parent], head=0, rank=rank))
                try:
                    moves.append(VerificationTree(_normalize_nodes(nodes)))
                except ContractViolationError:
                    continue
    return moves


def _subtree_exchange_moves(tree: VerificationTree) -> list[VerificationTree]:
    depths = tree.depths()
    by_depth: dict[int, list[int]] = {}
    for i in range(1, tree.width):
        by_depth.setdefault(depths[i], []).append(i)
    moves = []
    for idxs in by_depth.values():
        for a in range(len(idxs)):
            for b in range(a + 1, len(idxs)):
                swapped = _rebuild_with_shapes(tree, idxs[a], idxs[b])
                if swapped is not None and swapped.width == tree.width:
                    moves.append(swapped)
    return moves


def simulate_evaluator(table: HeadAccuracyTable, steps: int = 2000, seed: int = 0,
                       vocab_size: int = 257):
    """Tree evaluator backed by the Monte-Carlo oracle-drafter simulation."""
    from .decoding import simulate_oracle_acceptance

    def evaluate(tree: VerificationTree) -> float:
        return simulate_oracle_acceptance(tree, table.acc, steps,
                                          vocab_size=vocab_size, seed=seed)

    return evaluate


@dataclass
class WidthCandidate:
    width: int
    tree: VerificationTree
    acceptance: float
    latency: float
    ratio: float | None = None
    plan: PartitionPlan | None = None

    @property
    def rate(self) -> float:
        return self.acceptance / self.latency


def select_width(candidates: list[WidthCandidate]) -> WidthCandidate:
    """Highest acceptance/latency rate; ties favor the smaller width."""
    if not candidates:
        raise ContractViolationError("select_width: no candidates")
    return max(candidates, key=lambda c: (c.rate, -c.width))


@dataclass
class RatioSearchResult:
    ratio: float
    plan: PartitionPlan
    latency: LatencyStats
    trace: list[tuple[float, float]]  # (ratio, median latency) of accepted points


def tune_ratio(
    engine: ParallelEngine,
    width: int,
    context_bucket: int,
    init_ratio: float | None = None,
    step: float = 1.0 / 32.0,
    max_iters: int = 12,
    reps: int = 5,
    tree: VerificationTree | None = None,
) -> RatioSearchResult:
    """Hill-climb the partition ratio under real contention.

    Starts from the solo-latency proportion, probes ratio +/- step, and
    moves only when the candidate's [p10, p90] latency band lies strictly
    below the incumbent's.  The accepted-point trace is non-increasing in
    median latency by construction.
    """
    cfg = engine.config
    if tree is None:
        from .tree import balanced_tree

        tree = balanced_tree(width, cfg.n_draft_heads)
    pair_total = build_mask(tree).n_pairs

    def plan_at(r: float) -> PartitionPlan:
        return plan_from_ratio(cfg, r, context_bucket, width=width,
                               pair_total=pair_total, units=engine.units)

    def measure(r: float) -> LatencyStats:
        return measure_step_latency(engine, plan_at(r), width, context_bucket,
                                    reps=reps, tree=tree)

    if init_ratio is None:
        solo0 = measure(1.0)
        solo1 = measure(0.0)
        init_ratio = solo1.median / (solo0.median + solo1.median)
    ratio = min(1.0, max(0.0, round(init_ratio / step) * step))
    incumbent = measure(ratio)
    trace = [(ratio, incumbent.median)]
    for _ in range(max_iters):
        moved = False
        for cand_ratio in (ratio - step, ratio + step):
            if not 0.0 <= cand_ratio <= 1.0:
                continue
            cand = measure(cand_ratio)
            if cand.median < incumbent.median and cand.p90 < incumbent.p10:
                ratio, incumbent = cand_ratio, cand
                trace.append((ratio, incumbent.median))
                moved = True
                break
        if not moved:
            break
    return RatioSearchResult(ratio=ratio, plan=plan_at(ratio), latency=incumbent,
                             trace=trace)


def bucket_plans(
    engine: ParallelEngine,
    width: int,
    buckets,
    tree: VerificationTree | None = None,
    **tune_kwargs,
) -> dict[int, PartitionPlan]:
    """Tune one partition plan per context-length bucket."""
    buckets = sorted(set(int(b) for b in buckets))
    if not buckets:
        raise ConfigMismatchError("bucket_plans: empty bucket set")
    return {
        b: tune_ratio(engine, width, b, tree=tree, **tune_kwargs).plan for b in buckets
    }


def plan_for_context(plans: dict[int, PartitionPlan], cache_len: int) -> PartitionPlan:
    """Nearest bucket at or below the live context; smallest bucket as floor."""
    eligible = [b for b in plans if b <= cache_len]
    bucket = max(eligible) if eligible else min(plans)
    return plans[bucket]


@dataclass
class Strategy:
    """Deployment bundle: width, tree, per-bucket plans, tuning provenance."""

    width: int
    tree: VerificationTree
    plans: dict[int, PartitionPlan]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tree.width != self.width:
            raise ConfigMismatchError(
                f"strategy width {self.width} != tree width {self.tree.width}"
            )
        if not self.plans:
            raise ConfigMismatchError("strategy needs at least one plan")

    def plan_for(self, cache_len: int) -> PartitionPlan:
        return plan_for_context(self.plans, cache_len)

    def to_json(self, units=()) -> str:
        return json.dumps(
            {
                "width": self.width,
                "tree": json.loads(self.tree.to_json()),
                "plans": {
                    str(b): json.loads(plan_to_json(p, tuple(units)))
                    for b, p in self.plans.items()
                },
                "provenance": self.provenance,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Strategy":
        data = json.loads(text)
        plans = {}
        for b, pdata in data["plans"].items():
            plan, _units = plan_from_json(json.dumps(pdata))
            plans[int(b)] = plan
        return cls(
            width=int(data["width"]),
            tree=VerificationTree.from_json(json.dumps(data["tree"])),
            plans=plans,
            provenance=data.get("provenance", {}),
        )


DEFAULT_WIDTHS = (2, 4, 8, 16, 32, 64)


def sweep_widths(
    engine: ParallelEngine | None,
    table: HeadAccuracyTable,
    widths=DEFAULT_WIDTHS,
    context_bucket: int = 256,
    *,
    latency_fn=None,
    acceptance_fn=None,
    config: ModelConfig | None = None,
    buckets=None,
    tune_kwargs: dict | None = None,
) -> Strategy:
    """Try each power-of-two width, tune its ratio, pick max acceptance/latency.

    latency_fn(width, tree) and acceptance_fn(width, tree) may replace the
    measured latency and the estimator (for synthetic studies or when
    calibration data supplies real acceptance lengths); provenance records
    every candidate and which sources were used.
    """
    if engine is None and (latency_fn is None or config is None):
        raise ContractViolationError(
            "sweep_widths without an engine needs latency_fn and config"
        )
    cfg = config or engine.config
    tune_kwargs = tune_kwargs or {}
    candidates: list[WidthCandidate] = []
    skipped: list[int] = []
    for width in widths:
        try:
            tree = greedy_tree(table, width) if width > 1 else sequential_tree()
        except ConfigMismatchError:
            skipped.append(width)
            continue
        acceptance = (
            acceptance_fn(width, tree) if acceptance_fn is not None
            else expected_acceptance(tree, table)
        )
        if latency_fn is not None:
            latency = float(latency_fn(width, tree))
            ratio, plan = None, None
        else:
            result = tune_ratio(engine, width, context_bucket, tree=tree, **tune_kwargs)
            latency = result.latency.median
            ratio, plan = result.ratio, result.plan
        candidates.append(WidthCandidate(width=width, tree=tree, acceptance=acceptance,
                                         latency=latency, ratio=ratio, plan=plan))
    if not candidates:
        raise ConfigMismatchError("sweep_widths: no feasible width")
    best = select_width(candidates)
    if best.plan is None:
        ratio = best.ratio if best.ratio is not None else 0.5
        pair_total = build_mask(best.tree).n_pairs
        best_plan = plan_from_ratio(cfg, ratio, context_bucket, width=best.width,
                                    pair_total=pair_total)
    else:
        best_plan = best.plan
    plans = {context_bucket: best_plan}
    if buckets and engine is not None and latency_fn is None:
        plans = bucket_plans(engine, best.width, buckets, tree=best.tree, **tune_kwargs)
    provenance = {
        "candidates": [
            {
                "width": c.width,
                "acceptance": c.acceptance,
                "latency": c.latency,
                "rate": c.rate,
                "ratio": c.ratio,
            }
            for c in candidates
        ],
        "skipped_widths": skipped,
        "acceptance_source": "injected" if acceptance_fn is not None else "estimator",
        "latency_source": "injected" if latency_fn is not None else "measured",
    }
    return Strategy(width=best.width, tree=best.tree, plans=plans, provenance=provenance)
