"""Parameter-efficient fine-tuning on a self-contained numpy stack.

The package bundles a small reverse-mode autodiff tape, a grouped-query
rotary transformer, four adapter families (LoRA, soft prompts, prefix tuning
and its gated variant), symbolic parameter accounting, a trainer, synthetic
cross-lingual tasks, and generation-based evaluation.
"""

from .accounting import BUILTIN_MODELS, ParamReport, count, count_base, get_model_config, megaparams
from .adapters import (
    AdapterSpec,
    Attachment,
    LlamaAdapterSpec,
    LoraSpec,
    PrefixTuningSpec,
    SoftPromptSpec,
    attach,
    format_adapter_spec,
    init_adapter_state,
    merge_lora,
    parse_adapter_spec,
    trainable_parameters,
)
from .errors import (
    ConfigError,
    DataError,
    GraphError,
    NumericError,
    PeftForgeError,
    ShapeError,
)
from .evaluate import EvalReport, evaluate
from .gradcheck import GradCheckReport, grad_check
from .model import BaseWeights, ModelConfig, forward, generate, init_random, weight_layout
from .sampling import DecodeConfig, sample_token
from .serialize import load_adapter, load_weights, save_adapter, save_weights
from .tasks import (
    Example,
    LanguageFamily,
    build_language_family,
    build_pretrain_corpus,
    encode_example,
    gen_task,
    load_jsonl,
    save_jsonl,
)
from .tensor import Graph, Tensor, set_default_dtype
from .tokenizer import FixedTokenizer, get_tokenizer
from .training import FULL_FT_DEFAULTS, TrainConfig, TrainLog, loss_mask, train

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec", "Attachment", "BUILTIN_MODELS", "BaseWeights", "ConfigError",
    "DataError", "DecodeConfig", "EvalReport", "Example", "FULL_FT_DEFAULTS",
    "FixedTokenizer", "GradCheckReport", "Graph", "GraphError", "LanguageFamily",
    "LlamaAdapterSpec", "LoraSpec", "ModelConfig", "NumericError", "ParamReport",
    "PeftForgeError", "PrefixTuningSpec", "ShapeError", "SoftPromptSpec",
    "Tensor", "TrainConfig", "TrainLog", "attach", "build_language_family",
    "build_pretrain_corpus", "count", "count_base", "encode_example", "evaluate",
    "forward", "format_adapter_spec", "gen_task", "generate", "get_model_config",
    "get_tokenizer", "grad_check", "init_adapter_state", "init_random",
    "load_adapter", "load_jsonl", "load_weights", "loss_mask", "megaparams",
    "merge_lora", "parse_adapter_spec", "sample_token", "save_adapter",
    "save_jsonl", "save_weights", "set_default_dtype", "train",
    "trainable_parameters", "weight_layout",
]
