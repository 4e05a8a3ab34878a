"""Dense float32 primitives underlying every other module.

The one delicate contract here is ``gemm``: its accumulation over the inner
dimension runs in strictly ascending order, one rank-1 update at a time.
That makes computing any column range of a product bit-identical to slicing
the full product, which is what lets the parallel runtime validate
column-split execution with zero tolerance.  Do not replace the loop with a
BLAS call: BLAS picks different reduction trees for different output widths.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError

Array = np.ndarray


def as_f32(x) -> Array:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


def gemm(
    a: Array,
    b: Array,
    col_range: tuple[int, int] | None = None,
    k_chunk: int | None = None,
) -> Array:
    """Matrix product a @ b restricted to output columns [lo, hi).

    out[i, j] = sum_p a[i, p] * b[p, lo + j], accumulated in ascending p
    order so column partitions concatenate bit-exactly.

    Both code paths realize the identical reduction: the rank-1 loop keeps
    the accumulator hot in cache (best single-threaded), while k_chunk > 1
    batches the same ascending sum through add.accumulate so concurrent
    workers spend their time inside numpy instead of the interpreter.
    Results are bit-identical either way.
    """
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolationError(
            f"gemm shape mismatch: {a.shape} x {b.shape}"
        )
    m, k = a.shape
    n = b.shape[1]
    lo, hi = (0, n) if col_range is None else col_range
    if not (0 <= lo < hi <= n):
        raise ContractViolationError(f"gemm col_range [{lo},{hi}) invalid for n={n}")
    bc = b[:, lo:hi]
    if k_chunk is not None and k_chunk > 1:
        carry = np.zeros((m, hi - lo), dtype=np.float32)
        for p0 in range(0, k, k_chunk):
            p1 = min(k, p0 + k_chunk)
            t = a[:, p0:p1, None] * bc[None, p0:p1, :]
            t[:, 0, :] += carry
            np.add.accumulate(t, axis=1, out=t)
            carry = t[:, -1, :].copy()
        return carry
    out = np.zeros((m, hi - lo), dtype=np.float32)
    tmp = np.empty_like(out)
    for p in range(k):
        np.multiply(a[:, p, None], bc[p], out=tmp)
        np.add(out, tmp, out=out)
    return out


def gemm_worker_chunk(m: int, n_cols: int) -> int:
    """k_chunk heuristic for gemm running on concurrent worker threads."""
    return max(8, min(64, 32768 // max(1, m * n_cols)))


def softmax_rows(x: Array) -> Array:
    """Row-wise softmax with max subtraction; rejects non-finite input."""
    x = as_f32(x)
    if not np.isfinite(x).all():
        raise ContractViolationError("softmax_rows: non-finite input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rmsnorm(x: Array, g: Array, eps: float = 1e-5) -> Array:
    x = as_f32(x)
    g = as_f32(g)
    if x.shape[-1] != g.shape[0]:
        raise ContractViolationError(f"rmsnorm gain length {g.shape} vs {x.shape}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(eps)) * g


def rope(x: Array, positions, base: float) -> Array:
    """Rotary position transform, half-split lane pairing.

    Lane pair (i, i + d/2) is rotated by angle pos * base^(-2i/d).
    Position 0 is the identity.
    """
    x = as_f32(x)
    t, d = x.shape
    if d % 2 != 0:
        raise ContractViolationError(f"rope requires even head dim, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (t,):
        raise ContractViolationError(f"rope positions {pos.shape} vs rows {t}")
    if (pos < 0).any():
        raise ContractViolationError("rope positions must be nonnegative")
    half = d // 2
    inv_freq = base ** (-np.arange(0, half, dtype=np.float64) / half)
    ang = pos[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(np.float32)
    sin = np.sin(ang).astype(np.float32)
    x1, x2 = x[:, :half], x[:, half:]
    out = np.empty_like(x)
    out[:, :half] = x1 * cos - x2 * sin
    out[:, half:] = x1 * sin + x2 * cos
    return out


def argmax_row(x: Array) -> int:
    """Index of the row maximum; ties go to the smallest index."""
    v = np.asarray(x).reshape(-1)
    if v.size == 0:
        raise ContractViolationError("argmax_row: empty input")
    return int(np.argmax(v))


def topk_row(x: Array, k: int) -> Array:
    """Indices of the k largest entries, ties broken toward smaller index."""
    v = np.asarray(x).reshape(-1)
    if not 1 <= k <= v.size:
        raise ContractViolationError(f"topk_row k={k} out of range for {v.size}")
    order = np.lexsort((np.arange(v.size), -v))
    return order[:k]


def silu(x: Array) -> Array:
    x = as_f32(x)
    return x / (np.float32(1.0) + np.exp(-x))
