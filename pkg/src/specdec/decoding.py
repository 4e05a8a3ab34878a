"""Tree-verified speculative decoding loop.

Each step assembles a block of draft candidates shaped by a verification
tree, runs the target model once over the block, accepts the longest
root-anchored chain whose tokens match the model's own greedy choices, and
always banks one bonus token from the last accepted position.  The commit
path gathers only the accepted rows' staged KV into the cache, so a step
grows the cache by exactly the number of tokens it emits and the generated
sequence is identical to plain sequential greedy decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigMismatchError, InvalidTableError
from .model import DraftCandidates, Engine, KVCache
from .sparse_attn import build_mask
from .tensor_ops import argmax_row
from .tree import VerificationTree


@dataclass
class AcceptanceRecord:
    steps: int = 0
    tokens_emitted: int = 0

    @property
    def acceptance_length(self) -> float:
        return self.tokens_emitted / self.steps if self.steps else 0.0

    def add_step(self, emitted: int):
        self.steps += 1
        self.tokens_emitted += emitted


def assemble_block(
    tree: VerificationTree,
    root_token: int,
    candidates: DraftCandidates,
    cache_len: int,
) -> tuple[list[int], list[int]]:
    """Token ids and absolute positions for the block, root first."""
    tokens = [int(root_token)]
    depths = tree.depths()
    for node in tree.nodes:
        if node.head > candidates.token_ids.shape[0] or node.rank >= candidates.k:
            raise ConfigMismatchError(
                f"tree wants head {node.head} rank {node.rank}, candidates are "
                f"{candidates.token_ids.shape}"
            )
        tokens.append(int(candidates.token_ids[node.head - 1, node.rank]))
    positions = [cache_len + d for d in depths]
    return tokens, positions


def verify(
    tree: VerificationTree,
    block_tokens,
    block_logits: np.ndarray,
) -> tuple[list[int], int]:
    """Greedy verification walk.

    From the root, a child is accepted iff its token equals the argmax of
    the logits at its parent; the walk continues along the unique matching
    child.  Returns (accepted node indices, bonus token from the last
    accepted position).
    """
    tokens = list(block_tokens)
    children = tree.children()
    path: list[int] = []
    cur = 0
    while True:
        want = argmax_row(block_logits[cur])
        nxt = None
        for child in children[cur]:
            if tokens[child] == want:
                nxt = child
                break
        if nxt is None:
            return path, want
        path.append(nxt)
        cur = nxt


@dataclass
class StepResult:
    emitted: list[int]
    hidden: np.ndarray  # hidden state at the last accepted position
    accepted_path: list[int]


def speculative_step(
    engine,
    cache: KVCache,
    tree: VerificationTree,
    root_token: int,
    hidden: np.ndarray,
    drafter=None,
    mask=None,
) -> StepResult:
    """One draft-verify-commit cycle; emits the accepted path plus the bonus."""
    if cache.length + tree.width > engine.config.max_context:
        raise CapacityError("speculative block would overflow max_context")
    if mask is None:
        mask = build_mask(tree)
    if tree.width == 1:
        candidates = None
        tokens, positions = [int(root_token)], [cache.length]
    else:
        k_need = tree.max_rank() + 1
        if drafter is not None:
            candidates = drafter(hidden, cache.length)
        else:
            candidates = engine.draft(hidden, k_need)
        if candidates.k < k_need:
            raise ConfigMismatchError(
                f"tree needs {k_need} ranks, drafter provided {candidates.k}"
            )
        tokens, positions = assemble_block(tree, root_token, candidates, cache.length)
    block = engine.forward_block(cache, tokens, positions, mask)
    path, bonus = verify(tree, tokens, block.logits)
    cache.append(block.staged_k, block.staged_v, [0] + path)
    last = path[-1] if path else 0
    emitted = [tokens[i] for i in path] + [int(bonus)]
    return StepResult(emitted=emitted, hidden=block.hidden[last : last + 1].copy(),
                      accepted_path=path)


@dataclass
class GenerationResult:
    tokens: list[int]
    record: AcceptanceRecord


def generate_sequential(
    engine: Engine,
    prompt,
    max_new_tokens: int,
    stop_token: int | None = None,
    collect_hidden: bool = False,
):
    """Plain greedy decoding; the reference every speculative run must match.

    Returns (tokens, hiddens) where hiddens[i] is the final hidden state
    from which tokens[i] was predicted (only populated if requested).
    """
    cache, hidden, logits = engine.prefill(prompt)
    out: list[int] = []
    hiddens: list[np.ndarray] = []
    token = argmax_row(logits[0])
    while True:
        out.append(token)
        if collect_hidden:
            hiddens.append(hidden.copy())
        if len(out) >= max_new_tokens:
            break
        if stop_token is not None and token == stop_token:
            break
        if cache.length >= engine.config.max_context:
            break
        result = engine._step_single(cache, token)
        hidden = result.hidden[0:1]
        token = argmax_row(result.logits[0])
    return out, hiddens


def generate_speculative(
    engine,
    prompt,
    max_new_tokens: int,
    tree: VerificationTree,
    drafter=None,
    stop_token: int | None = None,
) -> GenerationResult:
    """Speculative greedy decoding; token-identical to generate_sequential."""
    cache, hidden, logits = engine.prefill(prompt)
    mask = build_mask(tree)
    record = AcceptanceRecord()
    out: list[int] = [argmax_row(logits[0])]
    while len(out) < max_new_tokens:
        if stop_token is not None and out[-1] == stop_token:
            break
        if cache.length + tree.width > engine.config.max_context:
            break
        step = speculative_step(engine, cache, tree, out[-1], hidden,
                                drafter=drafter, mask=mask)
        record.add_step(len(step.emitted))
        out.extend(step.emitted)
        hidden = step.hidden
    tokens = out[: max_new_tokens]
    if stop_token is not None and stop_token in tokens:
        tokens = tokens[: tokens.index(stop_token) + 1]
    return GenerationResult(tokens=tokens, record=record)


class OracleDrafter:
    """Drafter with a known per-(head, rank) hit probability.

    Knows the true greedy continuation (`truth[p]` is the token at absolute
    position p) and plants it in head h's rank-r slot with probability
    acc[h-1][r], independently across heads; all other slots get distinct
    wrong tokens.  Gives the tuner's acceptance estimator something with a
    controllable ground truth.
    """

    def __init__(self, truth, acc, vocab_size: int, seed: int = 0):
        self.truth = list(truth)
        self.acc = np.asarray(acc, dtype=np.float64)
        if self.acc.ndim != 2:
            raise InvalidTableError("acc must be [n_heads, k]")
        if (self.acc < 0).any() or (self.acc.sum(axis=1) > 1.0 + 1e-9).any():
            raise InvalidTableError("acc rows must be nonnegative and sum to <= 1")
        self.vocab_size = vocab_size
        self.rng = np.random.default_rng(seed)

    def __call__(self, hidden, position: int) -> DraftCandidates:
        n_heads, k = self.acc.shape
        ids = np.empty((n_heads, k), dtype=np.int64)
        probs = np.empty((n_heads, k), dtype=np.float32)
        for h in range(n_heads):
            true_tok = None
            pos = position + h + 1
            if pos < len(self.truth):
                true_tok = int(self.truth[pos])
            plant = self._sample_rank(self.acc[h])
            row = self._wrong_tokens(true_tok, k)
            if true_tok is not None and plant is not None:
                row[plant] = true_tok
            ids[h] = row
            probs[h] = np.linspace(0.9, 0.1, k, dtype=np.float32)
        return DraftCandidates(token_ids=ids, probs=probs)

    def _sample_rank(self, row: np.ndarray) -> int | None:
        u = self.rng.random()
        acc = 0.0
        for r, p in enumerate(row):
            acc += p
            if u < acc:
                return r
        return None

    def _wrong_tokens(self, true_tok, k: int) -> np.ndarray:
        # distinct fillers that can never equal the true token
        if k + 1 >= self.vocab_size:
            raise InvalidTableError(f"vocab {self.vocab_size} too small for k={k}")
        out = np.empty(k, dtype=np.int64)
        fill = self.vocab_size - 1
        for i in range(k):
            if true_tok is not None and fill == true_tok:
                fill -= 1
            out[i] = fill
            fill -= 1
        return out


def simulate_oracle_acceptance(
    tree: VerificationTree,
    acc,
    steps: int,
    vocab_size: int = 257,
    seed: int = 0,
) -> float:
    """Monte-Carlo acceptance length through the real assemble/verify path.

    Each simulated step invents a fresh greedy continuation, drafts with
    OracleDrafter, and builds block logits that argmax to the true next
    token at every block row; verify() then scores the step exactly as the
    engine would.
    """
    acc = np.asarray(acc, dtype=np.float64)
    depth = tree.depth()
    drafter = OracleDrafter(truth=[], acc=acc, vocab_size=vocab_size, seed=seed)
    rng = np.random.default_rng(seed + 1)
    depths = tree.depths()
    record = AcceptanceRecord()
    # truth tokens come from the low id range, fillers from the top, so a
    # filler can never collide with the continuation
    hi = vocab_size - (acc.shape[1] + depth + 2)
    if hi < 2:
        raise InvalidTableError("vocab too small for simulation")
    for _ in range(steps):
        truth = rng.integers(0, hi, size=depth + 2)
        drafter.truth = [int(t) for t in truth]
        cands = drafter(None, position=0)
        tokens, _ = assemble_block(tree, int(truth[0]), cands, cache_len=0)
        logits = np.zeros((tree.width, vocab_size), dtype=np.float32)
        for i in range(tree.width):
            logits[i, truth[depths[i] + 1]] = 1.0
        path, _ = verify(tree, tokens, logits)
        record.add_step(len(path) + 1)
    return record.acceptance_length
