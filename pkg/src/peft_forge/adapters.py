"""Parameter-efficient adapters over a frozen base model.

Four families share one lifecycle: a small frozen-shape spec describes the
adapter, `init_adapter_state` allocates its trainable tensors, and `attach`
wires them into the transformer's seams (attention taps, the q/k/v projection
hook, or prepended embeddings) without touching base weights.

* LoRA: y = x W + (alpha/r) (x A) B on chosen q/k/v projections. B starts at
  zero so the adapted model is exactly the base model at init; `merge` folds
  a trained pair back into W for inference-time equivalence checks.
* Soft prompt: k learned embedding rows prepended to the input. They occupy
  real positions and receive rotary encoding like ordinary tokens.
* Prefix tuning: per adapted layer, k learned d_model rows are pushed through
  that layer's frozen key/value projections and prepended to the attention
  keys/values. Prefix slots bypass rotary encoding, occupy no sequence
  position, and are visible to every query.
* Gated prefix (llama_adapter): prefix tuning where prefix and sequence
  scores are softmaxed separately and the prefix block is scaled by tanh(g),
  g zero-initialized. At init the adapter contributes exactly nothing, which
  is what makes randomly initialized prefixes trainable without destabilizing
  the pretrained attention pattern.

"Final L layers" means layer indices n_layers - L .. n_layers - 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .model import AttentionTap, BaseWeights, LayerView, ModelConfig, split_heads
from .tensor import Tensor, add, concat, matmul, mul, narrow, reshape, softmax, tanh

INIT_STD = 0.02

LORA_TARGET_DIMS = {
    "q": lambda c: (c.d_model, c.q_dim),
    "k": lambda c: (c.d_model, c.kv_dim),
    "v": lambda c: (c.d_model, c.kv_dim),
}


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q", "k", "v")


@dataclass(frozen=True)
class SoftPromptSpec:
    n_tokens: int = 10


@dataclass(frozen=True)
class PrefixTuningSpec:
    n_tokens: int = 10
    n_layers: int = 1


@dataclass(frozen=True)
class LlamaAdapterSpec:
    n_tokens: int = 10
    n_layers: int = 1
    per_head_gate: bool = False


AdapterSpec = LoraSpec | SoftPromptSpec | PrefixTuningSpec | LlamaAdapterSpec


def validate_spec(spec: AdapterSpec, config: ModelConfig) -> None:
    """Reject specs that cannot be instantiated against this model config."""
    if isinstance(spec, LoraSpec):
        if spec.rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {spec.rank}")
        if spec.alpha <= 0:
            raise ConfigError(f"lora alpha must be > 0, got {spec.alpha}")
        if not spec.targets:
            raise ConfigError("lora needs at least one target projection")
        seen = set()
        for t in spec.targets:
            if t not in LORA_TARGET_DIMS:
                raise ConfigError(f"unknown lora target {t!r}; expected q, k or v")
            if t in seen:
                raise ConfigError(f"duplicate lora target {t!r}")
            seen.add(t)
            d_in, d_out = LORA_TARGET_DIMS[t](config)
            if spec.rank > min(d_in, d_out):
                raise ConfigError(
                    f"lora rank {spec.rank} exceeds min dim {min(d_in, d_out)} of target {t!r}"
                )
    elif isinstance(spec, SoftPromptSpec):
        if spec.n_tokens < 1:
            raise ConfigError(f"soft prompt length must be >= 1, got {spec.n_tokens}")
        if spec.n_tokens >= config.max_seq:
            raise ConfigError(
                f"soft prompt length {spec.n_tokens} leaves no room under max_seq {config.max_seq}"
            )
    elif isinstance(spec, (PrefixTuningSpec, LlamaAdapterSpec)):
        if spec.n_tokens < 1:
            raise ConfigError(f"prefix length must be >= 1, got {spec.n_tokens}")
        if not (1 <= spec.n_layers <= config.n_layers):
            raise ConfigError(
                f"adapted layer count {spec.n_layers} out of range for {config.n_layers} layers"
            )
    else:
        raise ConfigError(f"unknown adapter spec type {type(spec).__name__}")


def adapted_layers(config: ModelConfig, n_adapted: int) -> range:
    """Indices of the final n_adapted layers."""
    return range(config.n_layers - n_adapted, config.n_layers)


def adapter_state_layout(config: ModelConfig, spec: AdapterSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Declaration-ordered (name, shape) inventory of an adapter's trainables."""
    validate_spec(spec, config)
    rows: list[tuple[str, tuple[int, ...]]] = []
    if isinstance(spec, LoraSpec):
        order = tuple(t for t in ("q", "k", "v") if t in spec.targets)
        for l in range(config.n_layers):
            for t in order:
                d_in, d_out = LORA_TARGET_DIMS[t](config)
                rows.append((f"layers.{l}.lora_{t}.a", (d_in, spec.rank)))
                rows.append((f"layers.{l}.lora_{t}.b", (spec.rank, d_out)))
    elif isinstance(spec, SoftPromptSpec):
        rows.append(("soft_prompt", (spec.n_tokens, config.d_model)))
    elif isinstance(spec, PrefixTuningSpec):
        for l in adapted_layers(config, spec.n_layers):
            rows.append((f"layers.{l}.prefix", (spec.n_tokens, config.d_model)))
    elif isinstance(spec, LlamaAdapterSpec):
        gate_shape = (config.n_heads,) if spec.per_head_gate else (1,)
        for l in adapted_layers(config, spec.n_layers):
            rows.append((f"layers.{l}.prefix", (spec.n_tokens, config.d_model)))
            rows.append((f"layers.{l}.gate", gate_shape))
    return rows


def init_adapter_state(config: ModelConfig, spec: AdapterSpec, seed: int) -> dict[str, Tensor]:
    """Allocate the adapter's trainable tensors, deterministic per seed.

    LoRA B matrices and all gates start at zero, so every freshly initialized
    adapter computes the identity over the base model.
    """
    rng = np.random.default_rng(seed)
    state: dict[str, Tensor] = {}
    for name, shape in adapter_state_layout(config, spec):
        if name.endswith(".b") or name.endswith(".gate"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        state[name] = Tensor(data, requires_grad=True, name=name)
    return state


def trainable_parameters(config: ModelConfig, spec: AdapterSpec,
                         state: Mapping[str, Tensor]) -> list[tuple[str, Tensor]]:
    """The adapter's trainables in declaration order, validated against the spec."""
    _check_state(config, spec, state)
    return list(state.items())


def _check_state(config: ModelConfig, spec: AdapterSpec, state: Mapping[str, Tensor]) -> None:
    layout = adapter_state_layout(config, spec)
    names = [n for n, _ in layout]
    if list(state.keys()) != names:
        raise ConfigError("adapter state names do not match the spec layout")
    for name, shape in layout:
        if state[name].data.shape != shape:
            raise ShapeError(f"adapter tensor {name} has shape {state[name].data.shape}, spec wants {shape}")


# ---------------------------------------------------------------------------
# LoRA math


def lora_project(w: Tensor, a: Tensor, b: Tensor, alpha: float, rank: int, h: Tensor) -> Tensor:
    """h W + (alpha/rank) (h A) B, the low-rank-updated projection."""
    if a.data.shape[1] != rank or b.data.shape[0] != rank:
        raise ShapeError(f"lora rank {rank} does not match factors {a.data.shape} x {b.data.shape}")
    if a.data.shape[0] != w.data.shape[0] or b.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"lora factors {a.data.shape} x {b.data.shape} do not frame weight {w.data.shape}"
        )
    return add(matmul(h, w), mul(matmul(matmul(h, a), b), alpha / rank))


def merge(w: Tensor, a: Tensor, b: Tensor, alpha: float, rank: int) -> Tensor:
    """W + (alpha/rank) A B as a fresh frozen tensor."""
    return Tensor(w.data + (alpha / rank) * (a.data @ b.data), name=w.name)


def merge_lora(weights: BaseWeights, spec: LoraSpec, state: Mapping[str, Tensor]) -> BaseWeights:
    """A new weight set with every targeted projection merged; untouched tensors are shared."""
    _check_state(weights.config, spec, state)
    target_names = {"q": "wq", "k": "wk", "v": "wv"}
    tensors = dict(weights.named())
    for l in range(weights.config.n_layers):
        for t in spec.targets:
            key = f"layers.{l}.{target_names[t]}"
            tensors[key] = merge(
                tensors[key],
                state[f"layers.{l}.lora_{t}.a"],
                state[f"layers.{l}.lora_{t}.b"],
                spec.alpha,
                spec.rank,
            )
    return BaseWeights(weights.config, tensors)


# ---------------------------------------------------------------------------
# prefix taps


class PrefixTap(AttentionTap):
    """Prepends learned key/value slots computed through the layer's frozen W_k/W_v."""

    def __init__(self, layer: int, prefix: Tensor, n_kv_heads: int):
        self.layer = layer
        self.prefix = prefix
        self.n_kv_heads = n_kv_heads

    def extend(self, layer: LayerView, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor, int]:
        n = self.prefix.data.shape[0]
        if n == 0:
            return k, v, 0
        pk = split_heads(matmul(self.prefix, layer.wk), self.n_kv_heads)
        pv = split_heads(matmul(self.prefix, layer.wv), self.n_kv_heads)
        return concat(pk, k, axis=1), concat(pv, v, axis=1), n


class GatedPrefixTap(PrefixTap):
    """Prefix slots behind a zero-initialized tanh gate.

    Sequence scores are softmaxed on their own (so they still sum to one),
    prefix scores are softmaxed separately and scaled by tanh(g). With g = 0
    the prefix contributes exactly zero and the layer reproduces the base
    model bit for bit.
    """

    def __init__(self, layer: int, prefix: Tensor, gate: Tensor, n_kv_heads: int):
        super().__init__(layer, prefix, n_kv_heads)
        self.gate = gate

    def weights(self, scores: Tensor, n_prefix: int) -> Tensor:
        if n_prefix == 0:
            return softmax(scores, axis=-1)
        width = scores.data.shape[-1]
        s_pref = narrow(scores, -1, 0, n_prefix)
        s_seq = narrow(scores, -1, n_prefix, width - n_prefix)
        gate = reshape(tanh(self.gate), (-1, 1, 1))
        a_pref = mul(softmax(s_pref, axis=-1), gate)
        a_seq = softmax(s_seq, axis=-1)
        return concat(a_pref, a_seq, axis=-1)


# ---------------------------------------------------------------------------
# attachment


@dataclass
class Attachment:
    """An adapter wired into the forward pass."""

    taps: dict[int, AttentionTap] | None = None
    prepend: Tensor | None = None
    project: Callable | None = None
    n_prepended: int = 0
    label: str = "base"

    def forward_kwargs(self) -> dict:
        return {"taps": self.taps, "prepend": self.prepend, "project": self.project}


def attach(weights: BaseWeights, spec: AdapterSpec | None,
           state: Mapping[str, Tensor] | None) -> Attachment:
    """Bind adapter state to a model. spec=None yields a no-op attachment."""
    if spec is None:
        return Attachment()
    config = weights.config
    _check_state(config, spec, state)
    label = format_adapter_spec(spec)

    if isinstance(spec, LoraSpec):
        table = {}
        for l in range(config.n_layers):
            for t in spec.targets:
                table[(l, t)] = (state[f"layers.{l}.lora_{t}.a"], state[f"layers.{l}.lora_{t}.b"])

        def project(layer_idx: int, name: str, x: Tensor, w: Tensor) -> Tensor:
            pair = table.get((layer_idx, name))
            if pair is None:
                return matmul(x, w)
            return lora_project(w, pair[0], pair[1], spec.alpha, spec.rank, x)

        return Attachment(project=project, label=label)

    if isinstance(spec, SoftPromptSpec):
        return Attachment(prepend=state["soft_prompt"],
                          n_prepended=spec.n_tokens, label=label)

    if isinstance(spec, LlamaAdapterSpec):
        taps: dict[int, AttentionTap] = {
            l: GatedPrefixTap(l, state[f"layers.{l}.prefix"], state[f"layers.{l}.gate"],
                              config.n_kv_heads)
            for l in adapted_layers(config, spec.n_layers)
        }
        return Attachment(taps=taps, label=label)

    taps = {
        l: PrefixTap(l, state[f"layers.{l}.prefix"], config.n_kv_heads)
        for l in adapted_layers(config, spec.n_layers)
    }
    return Attachment(taps=taps, label=label)


# ---------------------------------------------------------------------------
# spec mini-grammar: name:key=value,key=value


_SPEC_NAMES = ("lora", "soft", "prefix", "llama_adapter")


def parse_adapter_spec(text: str, n_layers: int | None = None) -> AdapterSpec:
    """Parse "lora:r=4,alpha=8,targets=qkv" style adapter descriptions.

    Known names: lora (r, alpha, targets), soft (K), prefix (K, L),
    llama_adapter (K, L, gate=per_layer|per_head). L defaults to every layer
    when the model depth is known.
    """
    text = text.strip()
    name, _, rest = text.partition(":")
    name = name.strip()
    if name not in _SPEC_NAMES:
        raise ConfigError(f"unknown adapter {name!r}; expected one of {', '.join(_SPEC_NAMES)}")
    aliases = {"k": "K", "l": "L", "layers": "L", "rank": "r"}
    kv: dict[str, str] = {}
    if rest.strip():
        for part in rest.split(","):
            key, eq, value = part.partition("=")
            key, value = key.strip(), value.strip()
            if not eq or not key or not value:
                raise ConfigError(f"malformed adapter option {part!r}; expected key=value")
            key = aliases.get(key, key)
            if key in kv:
                raise ConfigError(f"duplicate adapter option {key!r}")
            kv[key] = value

    def take_int(key: str, default: int | None) -> int:
        raw = kv.pop(key, None)
        if raw is None:
            if default is None:
                raise ConfigError(f"adapter {name!r} requires {key}=<int>")
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"adapter option {key}={raw!r} is not an integer") from None

    def take_layers() -> int:
        return take_int("L", n_layers)

    if name == "lora":
        rank = take_int("r", 4)
        raw_alpha = kv.pop("alpha", "8")
        try:
            alpha = float(raw_alpha)
        except ValueError:
            raise ConfigError(f"adapter option alpha={raw_alpha!r} is not a number") from None
        raw_targets = kv.pop("targets", "qkv")
        targets = tuple(t for t in ("q", "k", "v") if t in raw_targets)
        if set(raw_targets) - set("qkv") or not targets:
            raise ConfigError(f"adapter option targets={raw_targets!r} must name q, k and/or v")
        spec: AdapterSpec = LoraSpec(rank=rank, alpha=alpha, targets=targets)
    elif name == "soft":
        spec = SoftPromptSpec(n_tokens=take_int("K", 10))
    elif name == "prefix":
        spec = PrefixTuningSpec(n_tokens=take_int("K", 10), n_layers=take_layers())
    else:
        gate = kv.pop("gate", "per_layer")
        if gate not in ("per_layer", "per_head"):
            raise ConfigError(f"adapter option gate={gate!r} must be per_layer or per_head")
        spec = LlamaAdapterSpec(n_tokens=take_int("K", 10), n_layers=take_layers(),
                                per_head_gate=(gate == "per_head"))
    if kv:
        raise ConfigError(f"adapter {name!r} got unknown options: {', '.join(sorted(kv))}")
    return spec


def format_adapter_spec(spec: AdapterSpec) -> str:
    """Canonical mini-grammar string for manifests and reports."""
    if isinstance(spec, LoraSpec):
        alpha = int(spec.alpha) if float(spec.alpha).is_integer() else spec.alpha
        return f"lora:r={spec.rank},alpha={alpha},targets={''.join(spec.targets)}"
    if isinstance(spec, SoftPromptSpec):
        return f"soft:K={spec.n_tokens}"
    if isinstance(spec, PrefixTuningSpec):
        return f"prefix:K={spec.n_tokens},L={spec.n_layers}"
    gate = "per_head" if spec.per_head_gate else "per_layer"
    return f"llama_adapter:K={spec.n_tokens},L={spec.n_layers},gate={gate}"


def spec_to_dict(spec: AdapterSpec) -> dict:
    if isinstance(spec, LoraSpec):
        return {"kind": "lora", "rank": spec.rank, "alpha": spec.alpha, "targets": list(spec.targets)}
    if isinstance(spec, SoftPromptSpec):
        return {"kind": "soft", "n_tokens": spec.n_tokens}
    if isinstance(spec, PrefixTuningSpec):
        return {"kind": "prefix", "n_tokens": spec.n_tokens, "n_layers": spec.n_layers}
    return {"kind": "llama_adapter", "n_tokens": spec.n_tokens, "n_layers": spec.n_layers,
            "per_head_gate": spec.per_head_gate}


def spec_from_dict(d: Mapping) -> AdapterSpec:
    kind = d.get("kind")
    if kind == "lora":
        return LoraSpec(rank=int(d["rank"]), alpha=float(d["alpha"]), targets=tuple(d["targets"]))
    if kind == "soft":
        return SoftPromptSpec(n_tokens=int(d["n_tokens"]))
    if kind == "prefix":
        return PrefixTuningSpec(n_tokens=int(d["n_tokens"]), n_layers=int(d["n_layers"]))
    if kind == "llama_adapter":
        return LlamaAdapterSpec(n_tokens=int(d["n_tokens"]), n_layers=int(d["n_layers"]),
                                per_head_gate=bool(d["per_head_gate"]))
    raise ConfigError(f"unknown adapter kind {kind!r} in serialized spec")
