"""Attention kernels for the verification block.

A step's attention for one head splits into a dense part against the KV
cache prefix and a sparse part over the in-block token pairs allowed by the
verification tree.  Both produce unnormalized partial results under a
running max/sum ("online softmax"), so partials computed on different
worker units merge exactly into the monolithic answer.

The sparse pair list uses a COO layout grouped by row; ``sparse_av``
streams rows of V and accumulates into per-row output accumulators, in
fixed-size column blocks, mirroring how a register-blocked kernel would
keep the growing output row out of memory until it is complete.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError
from .tensor_ops import as_f32
from .tree import VerificationTree

NEG_INF = np.float32(-np.inf)


@dataclass
class KernelCounters:
    """Instrumentation: how many score entries the sparse kernels touched."""

    pairs_scored: int = 0

    def reset(self):
        self.pairs_scored = 0


counters = KernelCounters()


@dataclass(frozen=True)
class CooMask:
    """Row-grouped (row, col) pairs; col is an ancestor of row, or row itself."""

    rows: np.ndarray
    cols: np.ndarray
    width: int

    @property
    def n_pairs(self) -> int:
        return int(self.rows.size)

    def row_starts(self) -> np.ndarray:
        """Offsets of each block row's pair segment; length width + 1."""
        starts = np.searchsorted(self.rows, np.arange(self.width + 1))
        return starts.astype(np.int64)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.width, self.width), dtype=bool)
        dense[self.rows, self.cols] = True
        return dense


def build_mask(tree: VerificationTree) -> CooMask:
    """Pairs (i, j) with j an ancestor of i or i itself, row-major order."""
    rows, cols = [], []
    for i in range(tree.width):
        allowed = sorted(tree.ancestors(i) + [i])
        rows.extend([i] * len(allowed))
        cols.extend(allowed)
    return CooMask(
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        width=tree.width,
    )


@dataclass
class PartialAttention:
    """Unnormalized attention state for a set of rows.

    o holds sum(exp(score - m) * v); m is each row's running score max and l
    the matching exponential sum.  Rows that saw no columns carry the
    identity element m = -inf, l = 0 so merging stays total.
    """

    o: np.ndarray
    m: np.ndarray
    l: np.ndarray

    @classmethod
    def identity(cls, rows: int, d_head: int) -> "PartialAttention":
        return cls(
            o=np.zeros((rows, d_head), dtype=np.float32),
            m=np.full(rows, NEG_INF, dtype=np.float32),
            l=np.zeros(rows, dtype=np.float32),
        )


def sparse_qk(
    q: np.ndarray,
    k_block: np.ndarray,
    mask: CooMask,
    scale: float,
    pair_range: tuple[int, int] | None = None,
) -> np.ndarray:
    """Scores for the masked pairs only: scale * dot(q[row], k[col])."""
    q = as_f32(q)
    k_block = as_f32(k_block)
    lo, hi = (0, mask.n_pairs) if pair_range is None else pair_range
    rows = mask.rows[lo:hi]
    cols = mask.cols[lo:hi]
    counters.pairs_scored += int(rows.size)
    if rows.size == 0:
        return np.zeros(0, dtype=np.float32)
    prod = q[rows] * k_block[cols]
    return (prod.sum(axis=1) * np.float32(scale)).astype(np.float32)


def sparse_av(
    probs: np.ndarray,
    v_block: np.ndarray,
    mask: CooMask,
    pair_range: tuple[int, int] | None = None,
    col_block: int | None = None,
) -> np.ndarray:
    """out[i] = sum over pairs (i, j) of probs[pair] * v[j].

    Streams the pair list once per column block; each block accumulates in a
    local buffer and is stored exactly once.
    """
    v_block = as_f32(v_block)
    lo, hi = (0, mask.n_pairs) if pair_range is None else pair_range
    rows = mask.rows[lo:hi]
    cols = mask.cols[lo:hi]
    probs = as_f32(probs).reshape(-1)
    if probs.size != rows.size:
        raise ContractViolationError(
            f"sparse_av: {probs.size} weights for {rows.size} pairs"
        )
    w, d_head = mask.width, v_block.shape[1]
    out = np.empty((w, d_head), dtype=np.float32)
    step = d_head if col_block is None else max(1, col_block)
    # pairs are row-grouped, so reduceat over segment starts accumulates each
    # output row in pair order
    seg_rows, seg_starts = np.unique(rows, return_index=True)
    for c0 in range(0, d_head, step):
        c1 = min(d_head, c0 + step)
        acc = np.zeros((w, c1 - c0), dtype=np.float32)
        if rows.size:
            weighted = probs[:, None] * v_block[cols, c0:c1]
            acc[seg_rows] = np.add.reduceat(weighted, seg_starts, axis=0)
        out[:, c0:c1] = acc
    return out


def attend_dense_prefix(
    q: np.ndarray,
    k_cache: np.ndarray,
    v_cache: np.ndarray,
    row_range: tuple[int, int],
    scale: float,
) -> PartialAttention:
    """Running-max/sum softmax accumulation of q against cache rows [lo, hi)."""
    q = as_f32(q)
    lo, hi = row_range
    if lo == hi:
        return PartialAttention.identity(q.shape[0], q.shape[1])
    if not 0 <= lo < hi <= k_cache.shape[0]:
        raise ContractViolationError(f"prefix range [{lo},{hi}) out of bounds")
    k = as_f32(k_cache[lo:hi])
    v = as_f32(v_cache[lo:hi])
    scores = (q @ k.T) * np.float32(scale)
    m = scores.max(axis=1)
    p = np.exp(scores - m[:, None])
    return PartialAttention(o=(p @ v).astype(np.float32), m=m, l=p.sum(axis=1))


def attend_sparse_block(
    q: np.ndarray,
    k_block: np.ndarray,
    v_block: np.ndarray,
    mask: CooMask,
    scale: float,
    pair_range: tuple[int, int] | None = None,
    col_block: int | None = None,
) -> PartialAttention:
    """Partial attention over the masked in-block pairs (or a slice of them)."""
    q = as_f32(q)
    lo, hi = (0, mask.n_pairs) if pair_range is None else pair_range
    rows = mask.rows[lo:hi]
    part = PartialAttention.identity(mask.width, v_block.shape[1])
    if rows.size == 0:
        return part
    scores = sparse_qk(q, k_block, mask, scale, pair_range=(lo, hi))
    seg_rows, seg_starts = np.unique(rows, return_index=True)
    m_seg = np.maximum.reduceat(scores, seg_starts)
    part.m[seg_rows] = m_seg
    p = np.exp(scores - part.m[rows])
    part.l[seg_rows] = np.add.reduceat(p, seg_starts)
    part.o = sparse_av(p, v_block, mask, pair_range=(lo, hi), col_block=col_block)
    return part


def combine_partials(a: PartialAttention, b: PartialAttention) -> PartialAttention:
    """Fold two partials into one; associative and commutative up to rounding.

    The identity partial (m=-inf, l=0) is the unit, so arbitrary reduction
    trees over per-unit results are valid.
    """
    m = np.maximum(a.m, b.m)
    out = PartialAttention.identity(a.o.shape[0], a.o.shape[1])
    out.m = m
    for part in (a, b):
        live = part.l > 0
        scale = np.zeros_like(part.l)
        scale[live] = np.exp(part.m[live] - m[live])
        out.o += scale[:, None] * part.o
        out.l += scale * part.l
    return out


def merge_partials(parts: list[PartialAttention]) -> np.ndarray:
    """Combine partials into normalized attention output, rowwise.

    O = sum_p exp(m_p - m*) o_p / sum_p exp(m_p - m*) l_p with m* the
    per-row max over parts.  A row must have l > 0 in at least one part.
    """
    if not parts:
        raise ContractViolationError("merge_partials: no parts")
    m_star = parts[0].m.copy()
    for p in parts[1:]:
        np.maximum(m_star, p.m, out=m_star)
    rows, d_head = parts[0].o.shape
    num = np.zeros((rows, d_head), dtype=np.float32)
    den = np.zeros(rows, dtype=np.float32)
    for p in parts:
        live = p.l > 0
        scale = np.zeros(rows, dtype=np.float32)
        scale[live] = np.exp(p.m[live] - m_star[live])
        num += scale[:, None] * p.o
        den += scale * p.l
    if (den <= 0).any():
        raise ContractViolationError("merge_partials: row with no contributions")
    return num / den[:, None]
