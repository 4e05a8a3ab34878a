import numpy as np
import pytest

from specdec.config import NANO
from specdec.decoding import OracleDrafter, simulate_oracle_acceptance
from specdec.errors import ConfigMismatchError, InvalidTableError
from specdec.runtime import ParallelEngine, VirtualUnit, plan_from_ratio
from specdec.tree import TreeNode, VerificationTree, chain_tree, sequential_tree
from specdec.tuner import (
    HeadAccuracyTable,
    Strategy,
    WidthCandidate,
    bucket_plans,
    calibrate_heads,
    expected_acceptance,
    greedy_tree,
    plan_for_context,
    refine_tree,
    select_width,
    sweep_widths,
    tune_ratio,
)
from tests.conftest import ScriptedEngine

RNG = np.random.default_rng(23)


def random_table(rng, n_heads=3, k=2) -> HeadAccuracyTable:
    raw = rng.random((n_heads, k)) * (0.9 / k)
    raw = np.sort(raw, axis=1)[:, ::-1].copy()
    return HeadAccuracyTable(acc=raw)


def test_table_validation():
    with pytest.raises(InvalidTableError):
        HeadAccuracyTable(acc=[[0.7, 0.6]])
    with pytest.raises(InvalidTableError):
        HeadAccuracyTable(acc=[[-0.1]])
    t = HeadAccuracyTable(acc=[[0.5, 0.2]])
    assert t.n_heads == 1 and t.k == 2


def test_table_json_round_trip():
    t = HeadAccuracyTable(acc=[[0.5, 0.25], [0.3, 0.1]])
    t2 = HeadAccuracyTable.from_json(t.to_json())
    assert np.array_equal(t.acc, t2.acc)


def test_expected_acceptance_width1():
    t = HeadAccuracyTable(acc=[[0.9]])
    assert expected_acceptance(sequential_tree(), t) == pytest.approx(1.0)


def test_expected_acceptance_chain_closed_form():
    t = HeadAccuracyTable(acc=[[0.6], [0.5]])
    assert expected_acceptance(chain_tree(2), t) == pytest.approx(1.9)


def test_expected_acceptance_rank_out_of_range():
    t = HeadAccuracyTable(acc=[[0.6]])
    tree = VerificationTree((TreeNode(0, 1, 1),))
    with pytest.raises(ConfigMismatchError):
        expected_acceptance(tree, t)


def test_expected_acceptance_matches_monte_carlo():
    rng = np.random.default_rng(1)
    for trial in range(3):
        table = random_table(rng, n_heads=4, k=2)
        tree = greedy_tree(table, 6)
        closed = expected_acceptance(tree, table)
        mc = simulate_oracle_acceptance(tree, table.acc, steps=60_000, seed=trial)
        assert abs(closed - mc) <= 0.02


def test_greedy_width2_picks_best_single_candidate():
    t = HeadAccuracyTable(acc=[[0.9, 0.1]])
    tree = greedy_tree(t, 2)
    assert tree.nodes == (TreeNode(0, 1, 0),)


def test_greedy_spec_example_width4():
    t = HeadAccuracyTable(acc=[[0.6, 0.3], [0.5, 0.2]])
    tree = greedy_tree(t, 4)
    assert expected_acceptance(tree, t) == pytest.approx(2.2)
    # chosen nodes: (h1,r0), (h1,r1) via the shallower-depth tie-break, (h2,r0)
    assert tree.nodes[0] == TreeNode(0, 1, 0)
    assert tree.nodes[1] == TreeNode(0, 1, 1)
    assert tree.nodes[2] == TreeNode(1, 2, 0)


def test_greedy_width_exhausted():
    t = HeadAccuracyTable(acc=[[0.5]])
    with pytest.raises(ConfigMismatchError):
        greedy_tree(t, 4)  # one head, one rank: at most width 2


def exhaustive_best_acceptance(table: HeadAccuracyTable, width: int) -> float:
    """Max estimator value over every ancestor-closed node set of this width."""
    acc = table.acc
    H, K = acc.shape
    best = [1.0]

    def rec(frontier, chosen, total):
        if chosen == width - 1:
            best[0] = max(best[0], total)
            return
        for i, (depth, prod) in enumerate(frontier):
            rest = frontier[i + 1:]
            children = []
            if depth + 1 <= H:
                children = [(depth + 1, prod * acc[depth, r]) for r in range(K)]
            rec(rest + children, chosen + 1, total + prod)

    if width > 1:
        rec([(1, acc[0, r]) for r in range(K)], 0, 1.0)
    return best[0]


def test_greedy_matches_exhaustive_enumeration():
    rng = np.random.default_rng(2)
    for trial in range(20):
        table = random_table(rng, n_heads=3, k=2)
        for width in (2, 3, 4, 5, 6):
            g = expected_acceptance(greedy_tree(table, width), table)
            assert abs(g - exhaustive_best_acceptance(table, width)) <= 1e-9


def test_estimator_width_monotonicity():
    rng = np.random.default_rng(3)
    table = random_table(rng, n_heads=4, k=3)
    values = [
        expected_acceptance(greedy_tree(table, w), table) for w in range(1, 12)
    ]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_refine_keeps_estimator_optimal_tree():
    t = HeadAccuracyTable(acc=[[0.6, 0.3], [0.5, 0.2]])
    tree = greedy_tree(t, 4)
    refined = refine_tree(tree, lambda tr: expected_acceptance(tr, t), budget=60)
    assert refined == tree


def test_refine_replaces_zero_accuracy_leaf():
    t = HeadAccuracyTable(acc=[[0.5, 0.4], [0.0, 0.0]])
    # force a dead leaf: (h1,r0) -> (h2,r0) has zero product
    tree = VerificationTree((TreeNode(0, 1, 0), TreeNode(1, 2, 0)))
    refined = refine_tree(tree, lambda tr: expected_acceptance(tr, t), budget=60)
    assert expected_acceptance(refined, t) > expected_acceptance(tree, t)
    ranks = {(n.head, n.rank) for n in refined.nodes}
    assert (1, 1) in ranks  # the live rank replaced the dead subtree


def test_refine_never_decreases_measured_acceptance():
    rng = np.random.default_rng(4)
    for trial in range(10):
        table = random_table(rng, n_heads=3, k=3)
        tree = greedy_tree(table, 5)
        evaluator = lambda tr: simulate_oracle_acceptance(
            tr, table.acc, steps=800, seed=trial
        )
        base = evaluator(tree)
        refined = refine_tree(tree, evaluator, budget=12, seed=trial)
        assert evaluator(refined) >= base - 1e-12


def test_calibrate_heads_k1_single_column():
    engine = ScriptedEngine(NANO, seed=5)
    table = calibrate_heads(engine, [[1, 2, 3]], steps_per_prompt=12, k=1)
    assert table.acc.shape == (NANO.n_draft_heads, 1)


def test_calibrate_recovers_planted_table():
    engine = ScriptedEngine(NANO, seed=9)
    planted = np.array([[0.7, 0.2], [0.5, 0.3], [0.4, 0.1], [0.25, 0.05]])
    drafters = {}

    def draft_fn(hidden, position):
        key = len(drafters)
        # one drafter per prompt, reseeded: positions advance inside a prompt
        drafter = drafters.setdefault("d", OracleDrafter(
            [], planted, NANO.vocab_size, seed=13))
        drafter.truth = draft_fn.truth
        return drafter(hidden, position)

    rng = np.random.default_rng(31)
    prompts = [[int(t) for t in rng.integers(0, 40, size=4)] for _ in range(25)]
    # wire the oracle's truth to each prompt's scripted continuation
    tables = []
    hits = np.zeros_like(planted)
    totals = np.zeros(planted.shape[0])
    for prompt in prompts:
        script = engine._stream(prompt)
        draft_fn.truth = list(prompt) + script
        t = calibrate_heads(engine, [prompt], steps_per_prompt=110, k=2,
                            draft_fn=draft_fn)
        tables.append(t.acc)
    mean = np.mean(tables, axis=0)
    assert np.abs(mean - planted).max() <= 0.05


def test_calibrate_reports_monotonicity_violations():
    engine = ScriptedEngine(NANO, seed=2)
    planted = np.array([[0.1, 0.6], [0.1, 0.5], [0.1, 0.4], [0.1, 0.3]])
    drafter = OracleDrafter([], planted, NANO.vocab_size, seed=3)

    def draft_fn(hidden, position):
        return drafter(hidden, position)

    prompt = [5, 6, 7]
    drafter.truth = list(prompt) + engine._stream(prompt)
    table = calibrate_heads(engine, [prompt], steps_per_prompt=200, k=2,
                            draft_fn=draft_fn)
    assert not table.is_monotonic()
    assert table.monotonic_violations  # reported, not silently fixed


def test_select_width_is_rate_argmax():
    tree = sequential_tree()
    cands = [
        WidthCandidate(width=2, tree=tree, acceptance=1.5, latency=1.0),
        WidthCandidate(width=4, tree=tree, acceptance=2.0, latency=1.0),
        WidthCandidate(width=8, tree=tree, acceptance=2.5, latency=2.0),
    ]
    assert select_width(cands).width == 4


REFERENCE_ACCEPTANCE_PROFILE = {2: 1.72, 4: 2.28, 8: 2.59, 16: 2.93, 32: 3.19, 64: 3.34}


def synthetic_sweep(latency_fn):
    table = HeadAccuracyTable(acc=[[0.12] * 8] * 6)
    return sweep_widths(
        None,
        table,
        (2, 4, 8, 16, 32, 64),
        context_bucket=256,
        latency_fn=latency_fn,
        acceptance_fn=lambda w, tree: REFERENCE_ACCEPTANCE_PROFILE[w],
        config=NANO,
    )


def test_width_selection_flat_latency_picks_64():
    strategy = synthetic_sweep(lambda w, tree: 1.0)
    assert strategy.width == 64


def test_width_selection_latency_cliff_picks_16():
    strategy = synthetic_sweep(lambda w, tree: 1.0 if w <= 16 else 2.0)
    assert strategy.width == 16


def test_sweep_provenance_records_candidates():
    strategy = synthetic_sweep(lambda w, tree: 1.0)
    widths = [c["width"] for c in strategy.provenance["candidates"]]
    assert widths == [2, 4, 8, 16, 32, 64]
    assert strategy.provenance["latency_source"] == "injected"


def test_strategy_json_round_trip():
    table = HeadAccuracyTable(acc=[[0.4, 0.2], [0.3, 0.1]])
    tree = greedy_tree(table, 4)
    plans = {64: plan_from_ratio(NANO, 0.5, 64, width=4)}
    s = Strategy(width=4, tree=tree, plans=plans, provenance={"note": "test"})
    s2 = Strategy.from_json(s.to_json(units=(VirtualUnit(0), VirtualUnit(1))))
    assert s2.width == s.width and s2.tree == s.tree
    assert s2.plans == s.plans and s2.provenance == s.provenance


def test_strategy_width_tree_consistency():
    table = HeadAccuracyTable(acc=[[0.4]])
    with pytest.raises(ConfigMismatchError):
        Strategy(width=4, tree=greedy_tree(table, 2),
                 plans={1: plan_from_ratio(NANO, 0.5, 1, width=2)})


def test_plan_for_context_nearest_below():
    plans = {b: plan_from_ratio(NANO, 0.5, b, width=4) for b in (256, 1024, 4096)}
    assert plan_for_context(plans, 1500) is plans[1024]
    assert plan_for_context(plans, 100) is plans[256]
    assert plan_for_context(plans, 5000) is plans[4096]


def test_bucket_plans_single_bucket(nano_engine):
    engine = ParallelEngine(nano_engine.weights, NANO,
                            (VirtualUnit(0), VirtualUnit(1)))
    plans = bucket_plans(engine, 4, [16], reps=3, max_iters=1,
                         init_ratio=0.5, tree=chain_tree(3))
    assert set(plans) == {16}


def test_bucket_plans_empty_rejected(nano_engine):
    engine = ParallelEngine(nano_engine.weights, NANO,
                            (VirtualUnit(0), VirtualUnit(1)))
    with pytest.raises(ConfigMismatchError):
        bucket_plans(engine, 4, [])


def test_attention_work_fraction_grows_with_bucket():
    width = 8
    fractions = []
    for bucket in (64, 256, 1024):
        plan = plan_from_ratio(NANO, 0.5, bucket, width=width, pair_total=2 * width)
        dense = bucket * width
        total = dense + plan.pair_total
        # attention's share of total step work grows with context length
        linear_work = sum(c[-1] for c in plan.linear_cuts.values()) * width
        fractions.append(total / (total + linear_work))
    assert fractions[0] < fractions[1] < fractions[2]


def test_strategy_deterministic_given_fixed_latencies():
    table = HeadAccuracyTable(acc=[[0.3, 0.1], [0.25, 0.05], [0.2, 0.02]])
    fixed = {2: 1.0, 4: 1.1, 8: 1.3}

    def run():
        return sweep_widths(None, table, (2, 4, 8), context_bucket=64,
                            latency_fn=lambda w, t: fixed[w], config=NANO)

    a, b = run(), run()
    assert a.width == b.width and a.tree == b.tree
    assert a.to_json() == b.to_json()


def test_tune_ratio_trace_non_increasing(nano_engine):
    engine = ParallelEngine(nano_engine.weights, NANO,
                            (VirtualUnit(0), VirtualUnit(1)))
    result = tune_ratio(engine, 4, 16, init_ratio=0.5, reps=3, max_iters=2,
                        tree=chain_tree(3))
    medians = [m for _, m in result.trace]
    assert all(b <= a for a, b in zip(medians, medians[1:]))
    assert 0.0 <= result.ratio <= 1.0
