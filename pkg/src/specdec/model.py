"""Toy decoder-only transformer with a KV cache and multi-head drafting.

The model is deliberately small and LLaMA-flavored: RMSNorm, rotary
positions, SwiGLU MLP, plus one extra linear head per draft slot hanging
off the final hidden state.  Everything runs in float32 through the
fixed-order ``gemm``, so the parallel runtime can reproduce any forward
pass bit-for-bit on the linear stages.

``forward_block`` is the heart: it evaluates a whole verification block in
one pass, attending densely to the cache prefix and sparsely (tree mask)
within the block.  Its KV output is staged, never written to the cache;
commit happens only after verification decides which rows survive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import CapacityError, ConfigMismatchError, ContractViolationError
from .sparse_attn import (
    CooMask,
    attend_dense_prefix,
    attend_sparse_block,
    build_mask,
    merge_partials,
)
from .tensor_ops import argmax_row, as_f32, gemm, rmsnorm, rope, silu, softmax_rows, topk_row
from .tree import sequential_tree


@dataclass
class LayerWeights:
    attn_norm_g: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm_g: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class ModelWeights:
    embedding: np.ndarray          # [vocab, d_model]
    layers: list[LayerWeights]
    final_norm_g: np.ndarray
    lm_head: np.ndarray            # [d_model, vocab]
    draft_heads: list[np.ndarray]  # n_draft_heads x [d_model, vocab]

    def validate(self, config: ModelConfig):
        d, v, f = config.d_model, config.vocab_size, config.d_ff
        checks = [("embedding", self.embedding, (v, d)),
                  ("final_norm_g", self.final_norm_g, (d,)),
                  ("lm_head", self.lm_head, (d, v))]
        if len(self.layers) != config.n_layers:
            raise ConfigMismatchError(
                f"{len(self.layers)} layers, config says {config.n_layers}"
            )
        if len(self.draft_heads) != config.n_draft_heads:
            raise ConfigMismatchError(
                f"{len(self.draft_heads)} draft heads, config says {config.n_draft_heads}"
            )
        for i, lw in enumerate(self.layers):
            checks += [
                (f"layers.{i}.attn_norm_g", lw.attn_norm_g, (d,)),
                (f"layers.{i}.wq", lw.wq, (d, d)),
                (f"layers.{i}.wk", lw.wk, (d, d)),
                (f"layers.{i}.wv", lw.wv, (d, d)),
                (f"layers.{i}.wo", lw.wo, (d, d)),
                (f"layers.{i}.mlp_norm_g", lw.mlp_norm_g, (d,)),
                (f"layers.{i}.w_gate", lw.w_gate, (d, f)),
                (f"layers.{i}.w_up", lw.w_up, (d, f)),
                (f"layers.{i}.w_down", lw.w_down, (f, d)),
            ]
        for h, wh in enumerate(self.draft_heads):
            checks.append((f"draft_heads.{h}", wh, (d, v)))
        for name, arr, shape in checks:
            if tuple(arr.shape) != shape:
                raise ConfigMismatchError(f"{name}: shape {arr.shape}, want {shape}")


class KVCache:
    """Per-layer key/value stores of shape [max_context, n_heads, d_head]."""

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.max_context, config.n_heads, config.d_head)
        self.k = [np.zeros(shape, dtype=np.float32) for _ in range(config.n_layers)]
        self.v = [np.zeros(shape, dtype=np.float32) for _ in range(config.n_layers)]
        self.length = 0

    def append(self, staged_k: list[np.ndarray], staged_v: list[np.ndarray], rows):
        """Gather-compact the given staged block rows onto the cache tail."""
        rows = list(rows)
        if self.length + len(rows) > self.config.max_context:
            raise CapacityError("KV cache full")
        lo, hi = self.length, self.length + len(rows)
        for layer in range(self.config.n_layers):
            self.k[layer][lo:hi] = staged_k[layer][rows]
            self.v[layer][lo:hi] = staged_v[layer][rows]
        self.length = hi

    def clone(self) -> "KVCache":
        c = KVCache(self.config)
        for layer in range(self.config.n_layers):
            c.k[layer][: self.length] = self.k[layer][: self.length]
            c.v[layer][: self.length] = self.v[layer][: self.length]
        c.length = self.length
        return c


@dataclass
class DraftCandidates:
    """Per draft head: top-k token ids (rank order) and their probabilities."""

    token_ids: np.ndarray  # [n_draft_heads, k] int64
    probs: np.ndarray      # [n_draft_heads, k] float32, non-increasing per row

    def __post_init__(self):
        if self.token_ids.shape != self.probs.shape:
            raise ContractViolationError("candidate ids/probs shape mismatch")
        if (np.diff(self.probs, axis=1) > 1e-6).any():
            raise ContractViolationError("candidate probs must be non-increasing")

    @property
    def k(self) -> int:
        return self.token_ids.shape[1]


@dataclass
class BlockResult:
    logits: np.ndarray            # [w, vocab]
    hidden: np.ndarray            # [w, d_model], final-norm output
    staged_k: list[np.ndarray]    # per layer [w, n_heads, d_head]
    staged_v: list[np.ndarray]


def _split_heads(x: np.ndarray, n_heads: int, d_head: int) -> np.ndarray:
    return x.reshape(x.shape[0], n_heads, d_head)


class Engine:
    """Single-unit execution of the model: prefill, block forward, drafting."""

    def __init__(self, weights: ModelWeights, config: ModelConfig):
        weights.validate(config)
        self.weights = weights
        self.config = config
        self.scale = 1.0 / np.sqrt(config.d_head)

    def new_cache(self) -> KVCache:
        return KVCache(self.config)

    # -- prefill ---------------------------------------------------------

    def prefill(self, prompt_tokens) -> tuple[KVCache, np.ndarray, np.ndarray]:
        """Process the prompt, returning (cache, last hidden, last logits)."""
        tokens = list(prompt_tokens)
        if len(tokens) == 0:
            raise CapacityError("prefill: empty prompt")
        if len(tokens) > self.config.max_context:
            raise CapacityError(
                f"prompt length {len(tokens)} exceeds max_context {self.config.max_context}"
            )
        cache = self.new_cache()
        hidden = self._forward_dense_causal(tokens, cache)
        logits = gemm(hidden[-1:], self.weights.lm_head)
        return cache, hidden[-1:].copy(), logits

    def forward_full_logits(self, tokens) -> np.ndarray:
        """Dense causal forward returning logits at every position (tests)."""
        cache = self.new_cache()
        hidden = self._forward_dense_causal(list(tokens), cache)
        return gemm(hidden, self.weights.lm_head)

    def _forward_dense_causal(self, tokens: list[int], cache: KVCache) -> np.ndarray:
        cfg = self.config
        L = len(tokens)
        positions = np.arange(L)
        x = self.weights.embedding[np.asarray(tokens)].copy()
        tri = np.tril(np.ones((L, L), dtype=bool))
        for li, lw in enumerate(self.weights.layers):
            normed = rmsnorm(x, lw.attn_norm_g)
            q = _split_heads(gemm(normed, lw.wq), cfg.n_heads, cfg.d_head)
            k = _split_heads(gemm(normed, lw.wk), cfg.n_heads, cfg.d_head)
            v = _split_heads(gemm(normed, lw.wv), cfg.n_heads, cfg.d_head)
            attn = np.empty((L, cfg.d_model), dtype=np.float32)
            for h in range(cfg.n_heads):
                qh = rope(q[:, h], positions, cfg.rope_base)
                kh = rope(k[:, h], positions, cfg.rope_base)
                cache.k[li][:L, h] = kh
                cache.v[li][:L, h] = v[:, h]
                scores = (qh @ kh.T) * np.float32(self.scale)
                row_max = np.where(tri, scores, np.float32(-np.inf)).max(axis=1)
                p = np.exp(scores - row_max[:, None]) * tri
                probs = p / p.sum(axis=1, keepdims=True)
                attn[:, h * cfg.d_head : (h + 1) * cfg.d_head] = probs @ v[:, h]
            x = x + gemm(attn, lw.wo)
            normed2 = rmsnorm(x, lw.mlp_norm_g)
            gate = gemm(normed2, lw.w_gate)
            up = gemm(normed2, lw.w_up)
            x = x + gemm(silu(gate) * up, lw.w_down)
        cache.length = L
        return rmsnorm(x, self.weights.final_norm_g)

    # -- block forward ---------------------------------------------------

    def forward_block(
        self,
        cache: KVCache,
        block_tokens,
        block_positions,
        mask: CooMask,
        capture: dict | None = None,
    ) -> BlockResult:
        """Evaluate a verification block without committing its KV.

        Attention for each block row covers the full cache prefix plus the
        row's tree ancestors (and itself) inside the block.
        """
        cfg = self.config
        tokens = np.asarray(list(block_tokens))
        w = tokens.shape[0]
        if w < 1:
            raise ContractViolationError("forward_block: empty block")
        if mask.width != w:
            raise ConfigMismatchError(f"mask width {mask.width} != block width {w}")
        if cache.length + w > cfg.max_context:
            raise CapacityError("block would overflow max_context")
        positions = np.asarray(list(block_positions))
        if positions.shape != (w,):
            raise ContractViolationError("positions/block length mismatch")

        L = cache.length
        x = self.weights.embedding[tokens].copy()
        staged_k, staged_v = [], []
        for li, lw in enumerate(self.weights.layers):
            normed = rmsnorm(x, lw.attn_norm_g)
            q = gemm(normed, lw.wq)
            k = gemm(normed, lw.wk)
            v = gemm(normed, lw.wv)
            if capture is not None:
                capture[f"L{li}.qkv"] = {
                    "in": normed.copy(),
                    "out": np.concatenate([q, k, v], axis=1),
                    "residual": None,
                }
            qh = _split_heads(q, cfg.n_heads, cfg.d_head)
            kh = _split_heads(k, cfg.n_heads, cfg.d_head)
            vh = _split_heads(v, cfg.n_heads, cfg.d_head).copy()
            k_rot = np.empty_like(kh)
            q_rot = np.empty_like(qh)
            for h in range(cfg.n_heads):
                q_rot[:, h] = rope(qh[:, h], positions, cfg.rope_base)
                k_rot[:, h] = rope(kh[:, h], positions, cfg.rope_base)
            staged_k.append(k_rot)
            staged_v.append(vh)
            attn = np.empty((w, cfg.d_model), dtype=np.float32)
            for h in range(cfg.n_heads):
                parts = [
                    attend_dense_prefix(
                        q_rot[:, h], cache.k[li][:, h], cache.v[li][:, h], (0, L), self.scale
                    ),
                    attend_sparse_block(
                        q_rot[:, h], k_rot[:, h], vh[:, h], mask, self.scale
                    ),
                ]
                attn[:, h * cfg.d_head : (h + 1) * cfg.d_head] = merge_partials(parts)
            wout = gemm(attn, lw.wo)
            x_after_attn = x + wout
            if capture is not None:
                capture[f"L{li}.wo"] = {
                    "in": attn.copy(), "out": x_after_attn.copy(), "residual": x.copy(),
                }
            x = x_after_attn
            normed2 = rmsnorm(x, lw.mlp_norm_g)
            gate = gemm(normed2, lw.w_gate)
            up = gemm(normed2, lw.w_up)
            if capture is not None:
                capture[f"L{li}.gate_up"] = {
                    "in": normed2.copy(),
                    "out": np.concatenate([gate, up], axis=1),
                    "residual": None,
                }
            hbuf = silu(gate) * up
            down = gemm(hbuf, lw.w_down)
            x_after_mlp = x + down
            if capture is not None:
                capture[f"L{li}.down"] = {
                    "in": hbuf.copy(), "out": x_after_mlp.copy(), "residual": x.copy(),
                }
            x = x_after_mlp
        hidden = rmsnorm(x, self.weights.final_norm_g)
        logits = gemm(hidden, self.weights.lm_head)
        if capture is not None:
            capture["lm_head"] = {
                "in": hidden.copy(), "out": logits.copy(), "residual": None,
            }
        return BlockResult(logits=logits, hidden=hidden, staged_k=staged_k, staged_v=staged_v)

    # -- sequential decoding ---------------------------------------------

    def decode_step_sequential(self, cache: KVCache, last_token: int) -> int:
        """Append last_token's KV and return the greedy next token."""
        if cache.length >= self.config.max_context:
            raise CapacityError("cache at max_context")
        result = self._step_single(cache, last_token)
        return argmax_row(result.logits[0])

    def _step_single(self, cache: KVCache, token: int) -> BlockResult:
        mask = build_mask(sequential_tree())
        result = self.forward_block(cache, [token], [cache.length], mask)
        cache.append(result.staged_k, result.staged_v, [0])
        return result

    # -- drafting ----------------------------------------------------------

    def draft(self, hidden: np.ndarray, k: int) -> DraftCandidates:
        """Top-k candidates from each draft head given the last hidden state."""
        if k < 1:
            raise ContractViolationError("draft: k must be >= 1")
        hidden = as_f32(hidden).reshape(1, -1)
        n = self.config.n_draft_heads
        ids = np.empty((n, k), dtype=np.int64)
        probs = np.empty((n, k), dtype=np.float32)
        for h, wh in enumerate(self.weights.draft_heads):
            logits = gemm(hidden, wh)[0]
            top = topk_row(logits, k)
            ids[h] = top
            probs[h] = softmax_rows(logits[None, :])[0][top]
        return DraftCandidates(token_ids=ids, probs=probs)
