"""Weight container file format, toy model generation, byte tokenizer.

Container layout ("GHDR" format, little-endian):

    magic     4 bytes  b"GHDR"
    version   u32      currently 1
    count     u32      number of tensors
    table     per tensor: name (u32 length + utf-8), dtype code u32
              (0 = float32), rank u32, extents u32 * rank, offset u64
    payload   float32 data, each tensor 64-byte aligned

The model config rides along as a tensor named "__config__" so a loaded
file is self-describing; every weight tensor is shape-checked against it.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .config import ModelConfig
from .errors import (
    BadMagicError,
    ContainerError,
    TensorShapeError,
    TruncatedContainerError,
)
from .model import LayerWeights, ModelWeights

MAGIC = b"GHDR"
VERSION = 1
ALIGN = 64
_DTYPE_F32 = 0

CONFIG_TENSOR = "__config__"
_CONFIG_FIELDS = (
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "d_head",
    "d_ff",
    "n_draft_heads",
    "max_context",
    "rope_base",
)


def _weight_entries(config: ModelConfig, weights: ModelWeights):
    yield "embedding", weights.embedding
    for i, lw in enumerate(weights.layers):
        prefix = f"layers.{i}."
        yield prefix + "attn_norm_g", lw.attn_norm_g
        yield prefix + "wq", lw.wq
        yield prefix + "wk", lw.wk
        yield prefix + "wv", lw.wv
        yield prefix + "wo", lw.wo
        yield prefix + "mlp_norm_g", lw.mlp_norm_g
        yield prefix + "w_gate", lw.w_gate
        yield prefix + "w_up", lw.w_up
        yield prefix + "w_down", lw.w_down
    yield "final_norm_g", weights.final_norm_g
    yield "lm_head", weights.lm_head
    for h, wh in enumerate(weights.draft_heads):
        yield f"draft_heads.{h}", wh


def save_model(path: str, config: ModelConfig, weights: ModelWeights):
    weights.validate(config)
    cfg_vec = np.asarray([getattr(config, f) for f in _CONFIG_FIELDS], dtype=np.float32)
    tensors = [(CONFIG_TENSOR, cfg_vec)] + list(_weight_entries(config, weights))

    table = io.BytesIO()
    header_size = len(MAGIC) + 8
    table_size = 0
    for name, arr in tensors:
        table_size += 4 + len(name.encode()) + 4 + 4 + 4 * arr.ndim + 8
    offset = header_size + table_size
    payload = io.BytesIO()
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        pad = (-offset) % ALIGN
        payload.write(b"\0" * pad)
        offset += pad
        nb = name.encode()
        table.write(struct.pack("<I", len(nb)))
        table.write(nb)
        table.write(struct.pack("<II", _DTYPE_F32, arr.ndim))
        table.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        table.write(struct.pack("<Q", offset))
        payload.write(arr.tobytes())
        offset += arr.nbytes

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        f.write(table.getvalue())
        f.write(payload.getvalue())


def _read_struct(f, fmt: str, what: str):
    size = struct.calcsize(fmt)
    data = f.read(size)
    if len(data) != size:
        raise TruncatedContainerError(f"file ends inside {what}")
    return struct.unpack(fmt, data)


def load_model(path: str) -> tuple[ModelConfig, ModelWeights]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = _read_struct(f, "<II", "header")
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        entries = []
        names = set()
        for _ in range(count):
            (name_len,) = _read_struct(f, "<I", "tensor name length")
            name_b = f.read(name_len)
            if len(name_b) != name_len:
                raise TruncatedContainerError("file ends inside tensor name")
            name = name_b.decode()
            dtype, rank = _read_struct(f, "<II", f"tensor {name} header")
            if dtype != _DTYPE_F32:
                raise ContainerError(f"tensor {name}: unsupported dtype code {dtype}")
            shape = _read_struct(f, f"<{rank}I", f"tensor {name} extents")
            (offset,) = _read_struct(f, "<Q", f"tensor {name} offset")
            if name in names:
                raise ContainerError(f"duplicate tensor name {name}")
            names.add(name)
            entries.append((name, shape, offset))
        blob = f.read()
        base = f.tell() - len(blob)

    spans = []
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = offset - base
        end = start + 4 * n
        if start < 0 or end > len(blob):
            raise TruncatedContainerError(f"tensor {name}: payload truncated")
        spans.append((start, end, name))
        tensors[name] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ContainerError(f"tensors {n0} and {n1} overlap")

    if CONFIG_TENSOR not in tensors:
        raise ContainerError("missing config tensor")
    cfg_vec = tensors.pop(CONFIG_TENSOR)
    if cfg_vec.shape != (len(_CONFIG_FIELDS),):
        raise ContainerError("malformed config tensor")
    fields = {f: v for f, v in zip(_CONFIG_FIELDS, cfg_vec)}
    config = ModelConfig(
        **{f: (float(v) if f == "rope_base" else int(v)) for f, v in fields.items()}
    )

    def take(name, shape):
        if name not in tensors:
            raise ContainerError(f"missing tensor {name}")
        arr = tensors.pop(name)
        if tuple(arr.shape) != tuple(shape):
            raise TensorShapeError(f"{name}: stored {arr.shape}, config wants {shape}")
        return arr

    d, v, ff = config.d_model, config.vocab_size, config.d_ff
    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        layers.append(
            LayerWeights(
                attn_norm_g=take(p + "attn_norm_g", (d,)),
                wq=take(p + "wq", (d, d)),
                wk=take(p + "wk", (d, d)),
                wv=take(p + "wv", (d, d)),
                wo=take(p + "wo", (d, d)),
                mlp_norm_g=take(p + "mlp_norm_g", (d,)),
                w_gate=take(p + "w_gate", (d, ff)),
                w_up=take(p + "w_up", (d, ff)),
                w_down=take(p + "w_down", (ff, d)),
            )
        )
    weights = ModelWeights(
        embedding=take("embedding", (v, d)),
        layers=layers,
        final_norm_g=take("final_norm_g", (d,)),
        lm_head=take("lm_head", (d, v)),
        draft_heads=[take(f"draft_heads.{h}", (d, v)) for h in range(config.n_draft_heads)],
    )
    if tensors:
        raise ContainerError(f"unexpected tensors: {sorted(tensors)}")
    return config, weights


def gen_toy_model(seed: int, config: ModelConfig) -> ModelWeights:
    """Deterministic random weights: N(0, 0.02) matrices, unit norm gains."""
    rng = np.random.default_rng(seed)

    def mat(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

    layers = [
        LayerWeights(
            attn_norm_g=np.ones(config.d_model, dtype=np.float32),
            wq=mat(config.d_model, config.d_model),
            wk=mat(config.d_model, config.d_model),
            wv=mat(config.d_model, config.d_model),
            wo=mat(config.d_model, config.d_model),
            mlp_norm_g=np.ones(config.d_model, dtype=np.float32),
            w_gate=mat(config.d_model, config.d_ff),
            w_up=mat(config.d_model, config.d_ff),
            w_down=mat(config.d_ff, config.d_model),
        )
        for _ in range(config.n_layers)
    ]
    return ModelWeights(
        embedding=mat(config.vocab_size, config.d_model),
        layers=layers,
        final_norm_g=np.ones(config.d_model, dtype=np.float32),
        lm_head=mat(config.d_model, config.vocab_size),
        draft_heads=[mat(config.d_model, config.vocab_size) for _ in range(config.n_draft_heads)],
    )


class ByteTokenizer:
    """Identity byte <-> id map (vocab 256) plus one EOS id."""

    vocab_size = 257
    eos_id = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def encode_bytes(self, data: bytes) -> list[int]:
        return list(data)

    def decode_bytes(self, ids) -> bytes:
        return bytes(i for i in ids if 0 <= i < 256)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")
