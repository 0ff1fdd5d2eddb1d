"""Symbolic parameter accounting: closed-form trainable counts per adapter.

Counts are computed from the config alone, never by allocating arrays, so the
8B-shaped presets are as cheap as the toy one. The formulas:

* prefix / gated prefix: K * d_model * L, plus L (or L * n_heads) gate scalars
  for the gated variant, reported separately from the headline total because
  a handful of scalars sits below the two-decimal megaparameter precision.
* soft prompt: K * d_model.
* LoRA: sum over layers and targets of r * (d_in + d_out), where d_out is
  n_heads * head_dim for q and n_kv_heads * head_dim for k/v. Grouped-query
  models therefore pay less for k/v adapters than square-projection math
  would suggest.

The human-readable form divides by 1e6 and rounds half-up to two decimals
("1.23M" style).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .adapters import (
    AdapterSpec,
    LlamaAdapterSpec,
    LoraSpec,
    PrefixTuningSpec,
    SoftPromptSpec,
    adapted_layers,
    validate_spec,
)
from .errors import ConfigError
from .model import ModelConfig, weight_layout

BUILTIN_MODELS: dict[str, ModelConfig] = {
    # Small enough to train on a CPU in minutes.
    "toy": ModelConfig(n_layers=4, d_model=64, n_heads=4, n_kv_heads=2, head_dim=16,
                       vocab_size=512, max_seq=512, d_ff=256),
    # The 8B-class open-weights shape used for the headline counts. Never
    # allocated here; it exists so the accountant has real dimensions.
    "llama-3.1-8B": ModelConfig(n_layers=32, d_model=4096, n_heads=32, n_kv_heads=8,
                                head_dim=128, vocab_size=128256, max_seq=8192, d_ff=14336),
}


def get_model_config(name: str) -> ModelConfig:
    try:
        return BUILTIN_MODELS[name]
    except KeyError:
        raise ConfigError(
            f"unknown model {name!r}; built-ins: {', '.join(sorted(BUILTIN_MODELS))}"
        ) from None


def megaparams(count: int) -> str:
    """count / 1e6 rounded half-up to two decimals, e.g. 1228800 -> "1.23M"."""
    q = (Decimal(count) / Decimal(1_000_000)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{q}M"


@dataclass(frozen=True)
class ParamReport:
    """Trainable-parameter bill for one adapter on one model shape.

    `total` is the headline count and always equals the sum of `breakdown`.
    Gate scalars of the gated prefix variant are kept out of both and carried
    in `gate_params` so the headline matches the plain prefix figure.
    """

    total: int
    breakdown: dict[str, int] = field(default_factory=dict)
    human: str = ""
    gate_params: int = 0

    def __post_init__(self):
        if self.total != sum(self.breakdown.values()):
            raise ConfigError(
                f"report total {self.total} does not equal breakdown sum "
                f"{sum(self.breakdown.values())}"
            )

    @property
    def all_trainable(self) -> int:
        """Headline total plus separately reported gates; matches allocation exactly."""
        return self.total + self.gate_params

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "human": self.human,
            "breakdown": dict(self.breakdown),
            "gate_params": self.gate_params,
        }

    def format_table(self) -> str:
        width = max([len(k) for k in self.breakdown] + [5])
        lines = [f"{name:<{width}}  {n:>15,}" for name, n in self.breakdown.items()]
        lines.append(f"{'total':<{width}}  {self.total:>15,}  ({self.human})")
        if self.gate_params:
            lines.append(f"{'gates':<{width}}  {self.gate_params:>15,}  (reported separately)")
        return "\n".join(lines)


def count(config: ModelConfig, spec: AdapterSpec) -> ParamReport:
    """Closed-form trainable count for an adapter spec on a model shape."""
    validate_spec(spec, config)
    if isinstance(spec, LoraSpec):
        dims = {"q": config.q_dim, "k": config.kv_dim, "v": config.kv_dim}
        breakdown = {}
        for t in spec.targets:
            per_layer = spec.rank * (config.d_model + dims[t])
            breakdown[f"lora_{t}"] = per_layer * config.n_layers
        total = sum(breakdown.values())
        return ParamReport(total=total, breakdown=breakdown, human=megaparams(total))
    if isinstance(spec, SoftPromptSpec):
        total = spec.n_tokens * config.d_model
        return ParamReport(total=total, breakdown={"soft_prompt": total}, human=megaparams(total))
    if isinstance(spec, PrefixTuningSpec):
        total = spec.n_tokens * config.d_model * spec.n_layers
        return ParamReport(total=total, breakdown={"prefix_tokens": total}, human=megaparams(total))
    if isinstance(spec, LlamaAdapterSpec):
        total = spec.n_tokens * config.d_model * spec.n_layers
        gates = len(adapted_layers(config, spec.n_layers)) * (
            config.n_heads if spec.per_head_gate else 1
        )
        return ParamReport(total=total, breakdown={"prefix_tokens": total},
                           human=megaparams(total), gate_params=gates)
    raise ConfigError(f"unknown adapter spec type {type(spec).__name__}")


def count_base(config: ModelConfig) -> ParamReport:
    """Frozen-model element count from the layer inventory, grouped by role."""
    groups = {"embedding": 0, "attention": 0, "feed_forward": 0, "norms": 0, "output_head": 0}
    for name, shape in weight_layout(config):
        n = 1
        for s in shape:
            n *= s
        if name == "tok_embedding":
            groups["embedding"] += n
        elif name == "output_head":
            groups["output_head"] += n
        elif name.endswith("norm"):
            groups["norms"] += n
        elif name.split(".")[-1] in ("wq", "wk", "wv", "wo"):
            groups["attention"] += n
        else:
            groups["feed_forward"] += n
    breakdown = {k: v for k, v in groups.items() if v}
    total = sum(breakdown.values())
    return ParamReport(total=total, breakdown=breakdown, human=megaparams(total))
