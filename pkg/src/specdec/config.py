"""Model shape configuration and named presets."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractViolationError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_head: int
    d_ff: int
    n_draft_heads: int
    max_context: int
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_head", "d_ff"):
            if getattr(self, name) < 1:
                raise ContractViolationError(f"{name} must be >= 1")
        if self.n_draft_heads < 1:
            raise ContractViolationError("n_draft_heads must be >= 1")
        if self.max_context < 1:
            raise ContractViolationError("max_context must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ContractViolationError(
                f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}"
            )
        if self.rope_base <= 0:
            raise ContractViolationError("rope_base must be positive")


# Desk-scale default used by the CLI and the acceptance suite.
TINY = ModelConfig(
    vocab_size=257,
    d_model=128,
    n_layers=4,
    n_heads=4,
    d_head=32,
    d_ff=512,
    n_draft_heads=4,
    max_context=2048,
)

# Even smaller shape for fast unit tests; byte-tokenizer compatible vocab.
NANO = ModelConfig(
    vocab_size=257,
    d_model=32,
    n_layers=2,
    n_heads=2,
    d_head=16,
    d_ff=64,
    n_draft_heads=4,
    max_context=256,
)

PRESETS = {"tiny": TINY, "nano": NANO}
