import numpy as np
import pytest

from specdec.config import NANO, TINY
from specdec.container import gen_toy_model
from specdec.model import DraftCandidates, Engine


@pytest.fixture(scope="session")
def nano_engine() -> Engine:
    return Engine(gen_toy_model(11, NANO), NANO)


@pytest.fixture(scope="session")
def nano_engine_b() -> Engine:
    return Engine(gen_toy_model(99, NANO), NANO)


@pytest.fixture(scope="session")
def tiny_engine() -> Engine:
    return Engine(gen_toy_model(7, TINY), TINY)


def rel_to_scale(a: np.ndarray, b: np.ndarray) -> float:
    """max|a-b| / max|b|: relative error against the reference's scale."""
    denom = float(np.max(np.abs(b)))
    return float(np.max(np.abs(a - b))) / max(denom, 1e-30)


class ScriptedEngine:
    """Engine stand-in with a fixed token stream and no tensor math.

    Supports the subset of the Engine surface the decoding loop and the
    calibrator touch: prefill, _step_single, draft, config.  The stream is
    a deterministic pseudo-random function of the prompt.
    """

    class _Result:
        def __init__(self, logits, hidden):
            self.logits = logits
            self.hidden = hidden

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed

    def _stream(self, prompt):
        rng = np.random.default_rng(self.seed + 7919 * len(prompt) + sum(prompt))
        return [int(t) for t in rng.integers(0, self.config.vocab_size - 8, 4096)]

    def prefill(self, prompt):
        self._tokens = list(prompt)
        self._script = self._stream(prompt)
        cache = _FakeCache(len(prompt), self.config.max_context)
        logits = np.zeros((1, self.config.vocab_size), dtype=np.float32)
        logits[0, self._script[0]] = 1.0
        hidden = np.zeros((1, self.config.d_model), dtype=np.float32)
        return cache, hidden, logits

    def _step_single(self, cache, token):
        idx = cache.length - len(self._tokens) + 1
        cache.length += 1
        logits = np.zeros((1, self.config.vocab_size), dtype=np.float32)
        logits[0, self._script[idx]] = 1.0
        return self._Result(logits, np.zeros((1, self.config.d_model), dtype=np.float32))

    def draft(self, hidden, k):
        ids = np.zeros((self.config.n_draft_heads, k), dtype=np.int64)
        probs = np.linspace(0.9, 0.1, k, dtype=np.float32)
        return DraftCandidates(
            token_ids=ids, probs=np.tile(probs, (self.config.n_draft_heads, 1))
        )


class _FakeCache:
    def __init__(self, length, max_context):
        self.length = length
        self.max_context = max_context
