"""Decoder-only transformer with grouped-query attention and rotary positions.

The block layout follows the familiar open-weights recipe: pre-norm residual
blocks, RMS normalization, separate q/k/v/o projections where k and v carry
n_kv_heads groups, and a gated feed-forward. Input is one token sequence (no
batch axis); the forward pass returns one row of logits per position.

Two seams exist for adapters and are no-ops by default:

* an `AttentionTap` per layer may extend keys/values with extra slots (which
  bypass rotary encoding and occupy no sequence position) and may replace the
  score-to-weight step;
* a projection hook may replace how q/k/v are computed from hidden states.

Embeddings handed in via `prepend` are placed before the token embeddings and
are positioned like real tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .sampling import DecodeConfig, sample_token
from .tensor import (
    Tensor,
    add,
    concat,
    embedding,
    matmul,
    mul,
    narrow,
    repeat_rows,
    reshape,
    rmsnorm,
    rope,
    silu,
    softmax,
    transpose,
)

# init_random refuses to allocate models larger than this element count unless
# the caller raises the budget explicitly; counting is free, materializing an
# 8B-parameter array set on a desk machine is not.
DEFAULT_ELEMENT_BUDGET = 100_000_000


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    vocab_size: int
    max_seq: int
    d_ff: int
    tied_output: bool = False

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        for name in ("d_model", "n_heads", "n_kv_heads", "head_dim", "vocab_size", "max_seq", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary encoding, got {self.head_dim}")

    @property
    def q_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def as_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "d_ff": self.d_ff,
            "tied_output": self.tied_output,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "ModelConfig":
        return ModelConfig(**{k: d[k] for k in (
            "n_layers", "d_model", "n_heads", "n_kv_heads", "head_dim",
            "vocab_size", "max_seq", "d_ff", "tied_output")})


def weight_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declaration-ordered (name, shape) inventory of every base weight.

    This single list drives allocation, serialization, and the symbolic base
    count, so the three can never drift apart. The shapes are row-vector
    convention: hidden states multiply weights from the left (x @ W). The
    final pre-head normalization carries no learnable scale, so an
    embedding-only model (n_layers=0) holds exactly the embedding plus, when
    untied, the output head.
    """
    c = config
    rows: list[tuple[str, tuple[int, ...]]] = [("tok_embedding", (c.vocab_size, c.d_model))]
    for l in range(c.n_layers):
        p = f"layers.{l}."
        rows += [
            (p + "attn_norm", (c.d_model,)),
            (p + "wq", (c.d_model, c.q_dim)),
            (p + "wk", (c.d_model, c.kv_dim)),
            (p + "wv", (c.d_model, c.kv_dim)),
            (p + "wo", (c.q_dim, c.d_model)),
            (p + "ffn_norm", (c.d_model,)),
            (p + "w_gate", (c.d_model, c.d_ff)),
            (p + "w_up", (c.d_model, c.d_ff)),
            (p + "w_down", (c.d_ff, c.d_model)),
        ]
    if not c.tied_output:
        rows.append(("output_head", (c.d_model, c.vocab_size)))
    return rows


class LayerView:
    """Named handles on one layer's tensors."""

    __slots__ = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")

    def __init__(self, tensors: Mapping[str, Tensor], layer: int):
        p = f"layers.{layer}."
        for field in self.__slots__:
            setattr(self, field, tensors[p + field])


class BaseWeights:
    """The frozen substrate: every tensor of the base model, declaration order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = weight_layout(config)
        names = [n for n, _ in expected]
        if list(tensors.keys()) != names:
            raise ConfigError("weight names do not match the layout for this config")
        for name, shape in expected:
            if tensors[name].data.shape != shape:
                raise ShapeError(
                    f"weight {name} has shape {tensors[name].data.shape}, layout wants {shape}"
                )
        self.config = config
        self.tensors = tensors
        self.layers = [LayerView(tensors, l) for l in range(config.n_layers)]

    @property
    def tok_embedding(self) -> Tensor:
        return self.tensors["tok_embedding"]

    @property
    def output_head(self) -> Tensor | None:
        return self.tensors.get("output_head")

    def named(self):
        return self.tensors.items()

    def element_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def tobytes(self) -> bytes:
        """Raw little-endian concatenation of every array, for change detection."""
        return b"".join(np.ascontiguousarray(t.data).tobytes() for t in self.tensors.values())


def init_random(config: ModelConfig, seed: int,
                max_elements: int = DEFAULT_ELEMENT_BUDGET) -> BaseWeights:
    """Allocate base weights with scaled normal init, deterministic per seed.

    Projection matrices draw with std = fan_in^(-1/2), norm scales start at
    one, and the embedding uses std 0.02. Configs whose element count exceeds
    `max_elements` are refused; count parameters symbolically instead of
    allocating them.
    """
    layout = weight_layout(config)
    total = sum(int(np.prod(shape)) for _, shape in layout)
    if total > max_elements:
        raise ConfigError(
            f"config wants {total:,} elements, above the allocation budget of "
            f"{max_elements:,}; use the parameter accountant for large shapes"
        )
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in layout:
        if name.endswith("norm"):
            data = np.ones(shape)
        elif name == "tok_embedding":
            data = rng.normal(0.0, 0.02, size=shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        tensors[name] = Tensor(data, requires_grad=False, name=name)
    return BaseWeights(config, tensors)


# ---------------------------------------------------------------------------
# attention seams


class AttentionTap:
    """Per-layer hook over the attention internals.

    `extend` may prepend extra key/value slots (returning how many were added);
    the slots see no rotary rotation and every query may attend to them.
    `weights` turns masked scores into attention weights; the default is a
    plain softmax over the full row. The base class is an exact no-op.
    """

    layer: int = -1

    def extend(self, layer: LayerView, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor, int]:
        return k, v, 0

    def weights(self, scores: Tensor, n_prefix: int) -> Tensor:
        return softmax(scores, axis=-1)


def split_heads(t: Tensor, n_heads: int) -> Tensor:
    """(T, n*h) -> (n, T, h)."""
    length = t.data.shape[0]
    return transpose(reshape(t, (length, n_heads, -1)), (1, 0, 2))


def merge_heads(t: Tensor) -> Tensor:
    """(n, T, h) -> (T, n*h)."""
    n, length, h = t.data.shape
    return reshape(transpose(t, (1, 0, 2)), (length, n * h))


def rope_tables(n_positions: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin tables of shape (n_positions, head_dim/2), base 10000."""
    half = head_dim // 2
    inv_freq = 10000.0 ** (-np.arange(half) * 2.0 / head_dim)
    angles = np.arange(n_positions)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def causal_mask(n_queries: int, n_prefix: int = 0) -> np.ndarray:
    """Additive mask (n_queries, n_prefix + n_queries): 0 where visible, -inf above the diagonal."""
    seq = np.triu(np.full((n_queries, n_queries), -np.inf), k=1)
    if n_prefix == 0:
        return seq
    return np.concatenate([np.zeros((n_queries, n_prefix)), seq], axis=1)


ProjectHook = Callable[[int, str, Tensor, Tensor], Tensor]


def _attention(x: Tensor, layer: LayerView, layer_idx: int, config: ModelConfig,
               tap: AttentionTap | None, project: ProjectHook | None,
               cos: np.ndarray, sin: np.ndarray, base_mask: np.ndarray) -> Tensor:
    if project is None:
        q = matmul(x, layer.wq)
        k = matmul(x, layer.wk)
        v = matmul(x, layer.wv)
    else:
        q = project(layer_idx, "q", x, layer.wq)
        k = project(layer_idx, "k", x, layer.wk)
        v = project(layer_idx, "v", x, layer.wv)

    q = rope(split_heads(q, config.n_heads), cos, sin)
    k = rope(split_heads(k, config.n_kv_heads), cos, sin)
    v = split_heads(v, config.n_kv_heads)

    n_prefix = 0
    if tap is not None:
        k, v, n_prefix = tap.extend(layer, k, v)

    groups = config.n_heads // config.n_kv_heads
    if groups > 1:
        k = repeat_rows(k, groups)
        v = repeat_rows(v, groups)

    scores = matmul(q, transpose(k, (0, 2, 1)))
    scores = mul(scores, 1.0 / math.sqrt(config.head_dim))
    mask = base_mask if n_prefix == 0 else causal_mask(base_mask.shape[0], n_prefix)
    scores = add(scores, Tensor(mask))

    if tap is not None:
        attn = tap.weights(scores, n_prefix)
    else:
        attn = softmax(scores, axis=-1)

    out = merge_heads(matmul(attn, v))
    return matmul(out, layer.wo)


def _feed_forward(x: Tensor, layer: LayerView) -> Tensor:
    return matmul(mul(silu(matmul(x, layer.w_gate)), matmul(x, layer.w_up)), layer.w_down)


def forward(weights: BaseWeights, tokens, taps: Mapping[int, AttentionTap] | None = None,
            prepend: Tensor | None = None, project: ProjectHook | None = None) -> Tensor:
    """Run the model over one token sequence; returns logits, one row per position.

    Rows for `prepend` embeddings come first, then one row per token. Token ids
    outside the vocabulary and over-length sequences are rejected.
    """
    config = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise DataError(f"forward expects a non-empty 1-D token sequence, got shape {tokens.shape}")
    n_pre = 0 if prepend is None else prepend.data.shape[0]
    total = int(tokens.size) + n_pre
    if total > config.max_seq:
        raise DataError(f"sequence length {total} exceeds max_seq {config.max_seq}")
    if taps:
        for idx in taps:
            if not (0 <= idx < config.n_layers):
                raise ConfigError(f"tap layer index {idx} out of range for {config.n_layers} layers")

    h = embedding(weights.tok_embedding, tokens)
    if prepend is not None:
        if prepend.data.ndim != 2 or prepend.data.shape[1] != config.d_model:
            raise ShapeError(
                f"prepended embeddings must be (k, {config.d_model}), got {prepend.data.shape}"
            )
        h = concat(prepend, h, axis=0)

    cos, sin = rope_tables(total, config.head_dim)
    base_mask = causal_mask(total)

    for layer_idx, layer in enumerate(weights.layers):
        tap = taps.get(layer_idx) if taps else None
        attn = _attention(rmsnorm(h, layer.attn_norm), layer, layer_idx, config,
                          tap, project, cos, sin, base_mask)
        h = add(h, attn)
        ff = _feed_forward(rmsnorm(h, layer.ffn_norm), layer)
        h = add(h, ff)

    h = rmsnorm(h, None)
    if config.tied_output:
        return matmul(h, transpose(weights.tok_embedding, (1, 0)))
    return matmul(h, weights.output_head)


def generate(weights: BaseWeights, adapter, prompt_tokens, decode: DecodeConfig) -> list[int]:
    """Greedy or nucleus decoding from a prompt; returns the new tokens only.

    `adapter` is anything exposing `.taps`, `.prepend`, `.project` and
    `.n_prepended` (or None for the bare model). Decoding stops at eos_id or after
    max_new_tokens, and never runs past max_seq. Without a key/value cache
    each step recomputes the full forward pass, which is fine at desk scale.
    """
    taps = adapter.taps if adapter is not None else None
    prepend = adapter.prepend if adapter is not None else None
    project = adapter.project if adapter is not None else None
    n_pre = adapter.n_prepended if adapter is not None else 0

    rng = np.random.default_rng(decode.seed) if decode.temperature > 0 else None
    toks = [int(t) for t in prompt_tokens]
    out: list[int] = []
    for _ in range(decode.max_new_tokens):
        if len(toks) + n_pre >= weights.config.max_seq:
            break
        logits = forward(weights, toks, taps=taps, prepend=prepend, project=project)
        nxt = sample_token(logits.data[-1], decode.temperature, decode.top_p, rng)
        if decode.eos_id is not None and nxt == decode.eos_id:
            break
        out.append(nxt)
        toks.append(nxt)
    return out
