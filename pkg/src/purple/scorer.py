"""The propensity encoder: token-level cross-attention of each record to the
query, mean pooling to one vector per record, a position-free self-attention
stack over the record set, and a sigmoid head emitting per-record scores in
(0, 1).

No positional encodings anywhere, so the whole encoder is permutation
equivariant over records.  Pooling is mean; the feed-forward hidden width is
2*d_model and the head hidden width is d_model (both derived, not stored).

Checkpoint format (shared with the trainer): magic ``PRPL``, version u32 LE,
header-length u32 LE, JSON header {d_model, heads, layers, dtype,
param_order}, then raw little-endian floats per parameter in header order.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, ShapeError, Tape
from .core import Context

CHECKPOINT_MAGIC = b"PRPL"
CHECKPOINT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class EmbeddingsMissingError(ValueError):
    """A record or query without token embeddings reached the encoder."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class ScorerParams:
    """Named weight tensors plus the dimensions that determine their layout."""

    d_model: int
    heads: int
    layers: int
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def copy(self) -> "ScorerParams":
        return ScorerParams(
            self.d_model,
            self.heads,
            self.layers,
            OrderedDict((k, v.copy()) for k, v in self.tensors.items()),
        )

    def zeros_like(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items())


def param_layout(d_model: int, heads: int, layers: int) -> "OrderedDict[str, tuple[int, int]]":
    """Shapes of every parameter tensor, in canonical (checkpoint) order."""
    if d_model <= 0 or heads <= 0 or layers < 0:
        raise ValueError("dims must be positive (layers may be zero)")
    if d_model % heads != 0:
        raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
    dh = d_model // heads
    layout: "OrderedDict[str, tuple[int, int]]" = OrderedDict()

    def attention(prefix: str) -> None:
        for h in range(heads):
            for mat in ("wq", "wk", "wv"):
                layout[f"{prefix}.h{h}.{mat}"] = (d_model, dh)
                layout[f"{prefix}.h{h}.{mat[1]}b"] = (1, dh)
        layout[f"{prefix}.wo"] = (d_model, d_model)
        layout[f"{prefix}.bo"] = (1, d_model)

    attention("cross")
    hidden = 2 * d_model
    for layer in range(layers):
        attention(f"set{layer}.attn")
        layout[f"set{layer}.ff.w1"] = (d_model, hidden)
        layout[f"set{layer}.ff.b1"] = (1, hidden)
        layout[f"set{layer}.ff.w2"] = (hidden, d_model)
        layout[f"set{layer}.ff.b2"] = (1, d_model)
    layout["head.w1"] = (d_model, d_model)
    layout["head.b1"] = (1, d_model)
    layout["head.w2"] = (d_model, 1)
    layout["head.b2"] = (1, 1)
    return layout


def init_params(seed: int, d_model: int = 32, heads: int = 2, layers: int = 2) -> ScorerParams:
    """Seeded init: weight entries ~ N(0, 1)/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in param_layout(d_model, heads, layers).items():
        if name.endswith(("b", "b1", "b2", "bo")):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return ScorerParams(d_model, heads, layers, tensors)


def _attention_block(
    tape: Tape,
    queries_from: Node,
    keys_values_from: Node,
    params: ScorerParams,
    leaves: dict[str, Node],
    prefix: str,
) -> Node:
    """Multi-head scaled dot-product attention; rows of `queries_from` attend
    to rows of `keys_values_from`."""
    inv_scale = 1.0 / math.sqrt(params.head_dim)
    head_outputs = []
    for h in range(params.heads):
        q = tape.add(tape.matmul(queries_from, leaves[f"{prefix}.h{h}.wq"]), leaves[f"{prefix}.h{h}.qb"])
        k = tape.add(tape.matmul(keys_values_from, leaves[f"{prefix}.h{h}.wk"]), leaves[f"{prefix}.h{h}.kb"])
        v = tape.add(tape.matmul(keys_values_from, leaves[f"{prefix}.h{h}.wv"]), leaves[f"{prefix}.h{h}.vb"])
        weights = tape.row_softmax(tape.scale(tape.matmul(q, tape.transpose(k)), inv_scale))
        head_outputs.append(tape.matmul(weights, v))
    merged = head_outputs[0] if len(head_outputs) == 1 else tape.concat_cols(head_outputs)
    return tape.add(tape.matmul(merged, leaves[f"{prefix}.wo"]), leaves[f"{prefix}.bo"])


def _make_leaves(tape: Tape, params: ScorerParams) -> dict[str, Node]:
    return {name: tape.leaf(tensor) for name, tensor in params.tensors.items()}


def _check_width(matrix: np.ndarray, d_model: int, what: str) -> None:
    if matrix.shape[1] != d_model:
        raise ShapeError(f"{what} has embedding width {matrix.shape[1]}, scorer expects d_model={d_model}")


def cross_attend(record_tokens: np.ndarray, query_tokens: np.ndarray, params: ScorerParams) -> np.ndarray:
    """Record tokens attend to query tokens; returns the fused T_i x d matrix."""
    record_tokens = np.asarray(record_tokens, dtype=np.float64)
    query_tokens = np.asarray(query_tokens, dtype=np.float64)
    _check_width(record_tokens, params.d_model, "record tokens")
    _check_width(query_tokens, params.d_model, "query tokens")
    tape = Tape()
    leaves = _make_leaves(tape, params)
    out = _attention_block(tape, tape.leaf(record_tokens), tape.leaf(query_tokens), params, leaves, "cross")
    return out.value


@dataclass(frozen=True)
class PropensityVector:
    """Per-record scores, each strictly inside (0, 1)."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("propensities must be finite")
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise ValueError("propensities must lie strictly inside (0, 1)")
        arr.flags.writeable = False
        object.__setattr__(self, "scores", arr)

    def __len__(self) -> int:
        return self.scores.size


def propensity_node(tape: Tape, context: Context, params: ScorerParams) -> tuple[Node, dict[str, Node]]:
    """Full forward pass on a tape.

    Returns the N x 1 score node plus the parameter-leaf map so callers can
    read per-parameter gradients after a backward pass.
    """
    if context.query_embeddings is None:
        raise EmbeddingsMissingError(
            "query has no token embeddings; attach them with an embedding provider "
            "(hash_embed or load_embeddings) before scoring"
        )
    _check_width(context.query_embeddings, params.d_model, "query tokens")
    leaves = _make_leaves(tape, params)
    query_node = tape.leaf(context.query_embeddings)

    pooled = []
    for rec in context.records:
        if rec.token_embeddings is None:
            raise EmbeddingsMissingError(
                f"record {rec.id!r} has no token embeddings; attach them with an "
                "embedding provider (hash_embed or load_embeddings) before scoring"
            )
        _check_width(rec.token_embeddings, params.d_model, f"record {rec.id!r} tokens")
        fused = _attention_block(tape, tape.leaf(rec.token_embeddings), query_node, params, leaves, "cross")
        pooled.append(tape.mean_rows(fused))
    stack = pooled[0] if len(pooled) == 1 else tape.concat_rows(pooled)

    for layer in range(params.layers):
        attended = _attention_block(tape, stack, stack, params, leaves, f"set{layer}.attn")
        stack = tape.add(stack, attended)
        hidden = tape.relu(tape.add(tape.matmul(stack, leaves[f"set{layer}.ff.w1"]), leaves[f"set{layer}.ff.b1"]))
        ff = tape.add(tape.matmul(hidden, leaves[f"set{layer}.ff.w2"]), leaves[f"set{layer}.ff.b2"])
        stack = tape.add(stack, ff)

    hidden = tape.relu(tape.add(tape.matmul(stack, leaves["head.w1"]), leaves["head.b1"]))
    logits = tape.add(tape.matmul(hidden, leaves["head.w2"]), leaves["head.b2"])
    return tape.sigmoid(logits), leaves


def encode_records(context: Context, params: ScorerParams) -> PropensityVector:
    """Score every record in the context; see `propensity_node` for the wiring."""
    node, _ = propensity_node(Tape(), context, params)
    return PropensityVector(node.value[:, 0].copy())


def save_checkpoint(path, params: ScorerParams, dtype: str = "f64") -> None:
    """Atomic write (temp file + rename) of the PRPL checkpoint format.

    Default storage is f64 so that save -> load -> forward reproduces the
    pre-save forward bit-for-bit; pass dtype="f32" for half-size files when
    exact round-tripping is not required.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    header = {
        "d_model": params.d_model,
        "heads": params.heads,
        "layers": params.layers,
        "dtype": dtype,
        "param_order": list(params.tensors.keys()),
    }
    expected = list(param_layout(params.d_model, params.heads, params.layers).keys())
    if header["param_order"] != expected:
        raise CheckpointError("parameter set does not match the canonical layout")
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
            fh.write(header_bytes)
            for name in header["param_order"]:
                fh.write(np.ascontiguousarray(params.tensors[name], dtype=_DTYPES[dtype]).tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path) -> ScorerParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a PRPL checkpoint")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        layout = param_layout(header["d_model"], header["heads"], header["layers"])
        if header["param_order"] != list(layout.keys()):
            raise CheckpointError("param_order does not match the layout for the stored dims")
        dtype = _DTYPES[header.get("dtype", "f32")]
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name in header["param_order"]:
            shape = layout[name]
            count = shape[0] * shape[1]
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"checkpoint truncated while reading {name}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last parameter")
    return ScorerParams(header["d_model"], header["heads"], header["layers"], tensors)
