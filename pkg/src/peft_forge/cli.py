"""Command line interface.

Subcommands:

* params: symbolic trainable-parameter counts for a model/adapter pair.
* gen-task: write synthetic task data as one JSONL file per language.
* train: fit an adapter (or the full model) on JSONL data; writes the
  trained tensors, a step log, and a manifest that can rerun the job.
* eval: generate answers and score them; writes report.json / report.csv
  and a manifest.
* gradcheck: finite-difference audit of the adapter gradients on one
  synthetic example.

Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 numeric
failures (divergence, failed gradient audit). `--config FILE` accepts either
`key=value` lines or a manifest.json from a previous run; explicit flags win
over file values. Reruns from a manifest reproduce output files byte for
byte (manifests themselves differ only in recorded runtime).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .accounting import BUILTIN_MODELS, count, count_base, get_model_config
from .adapters import (attach, format_adapter_spec, init_adapter_state,
                       parse_adapter_spec, trainable_parameters)
from .errors import ConfigError, DataError, NumericError, PeftForgeError
from .evaluate import evaluate
from .gradcheck import grad_check
from .model import ModelConfig, forward, init_random
from .sampling import DecodeConfig
from .serialize import load_adapter, load_weights, save_adapter, save_weights
from .tasks import (TASKS, build_language_family, build_pretrain_corpus,
                    encode_example, gen_task, load_jsonl, save_jsonl)
from .tensor import cross_entropy, narrow
from .tokenizer import EOS_ID
from .training import FULL_FT_DEFAULTS, TrainConfig, train

_TRAIN_FIELDS = {
    "learning_rate": float, "epochs": int, "weight_decay": float,
    "batch_size": int, "seed": int, "optimizer": str, "lr_schedule": str,
    "warmup_ratio": float, "grad_clip": float,
}
_ALIASES = {"lr": "learning_rate", "schedule": "lr_schedule", "model_name": "model"}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} does not exist")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return _flatten_manifest(obj)
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}, line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return _canonical_keys(out)


def _flatten_manifest(obj: dict) -> dict:
    flat = dict(obj.get("train", {})) if isinstance(obj.get("train"), dict) else {}
    if isinstance(obj.get("decode"), dict):
        for k, v in obj["decode"].items():
            flat["decode_seed" if k == "seed" else k] = v
    for key, value in obj.items():
        if key in ("train", "decode", "outputs", "inputs", "command",
                   "runtime_seconds", "full_finetune"):
            continue
        if value is not None:
            flat[key] = value
    if obj.get("full_finetune"):
        flat["full_finetune"] = True
    return _canonical_keys(flat)


def _canonical_keys(flat: dict) -> dict:
    return {_ALIASES.get(k, k): v for k, v in flat.items()}


def _coerce(key: str, value, kind):
    if value is None or not isinstance(value, str):
        return value
    try:
        if kind is bool:
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def _pick(args_value, file_cfg: dict, key: str, default=None, kind=str):
    if args_value is not None:
        return args_value
    if key in file_cfg and file_cfg[key] is not None:
        return _coerce(key, file_cfg[key], kind)
    return default


def _resolve_base(args, file_cfg: dict, required_config: ModelConfig | None = None):
    """Base weights from --weights, or --model/--init-seed, or a stored config."""
    weights_path = _pick(getattr(args, "weights", None), file_cfg, "weights")
    model_name = _pick(getattr(args, "model", None), file_cfg, "model")
    init_seed = _pick(getattr(args, "init_seed", None), file_cfg, "init_seed", kind=int)
    if weights_path:
        weights = load_weights(weights_path)
        return weights, model_name, str(Path(weights_path).resolve()), init_seed
    config = None
    if model_name:
        config = get_model_config(model_name)
    elif required_config is not None:
        config = required_config
    elif isinstance(file_cfg.get("model_config"), dict):
        config = ModelConfig.from_dict(file_cfg["model_config"])
    if config is None:
        raise ConfigError("no base model: pass --weights, or --model with --init-seed")
    if required_config is not None and config.as_dict() != required_config.as_dict():
        raise ConfigError("base model config does not match the adapter file")
    seed = 0 if init_seed is None else int(init_seed)
    return init_random(config, seed), model_name, None, seed


def _write_manifest(out_dir: Path, manifest: dict) -> None:
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(paths: list[str]):
    examples = []
    for p in paths:
        examples.extend(load_jsonl(p))
    if not examples:
        raise DataError("no examples in " + ", ".join(paths))
    return examples


# --- params -------------------------------------------------------------------

def _cmd_params(args) -> int:
    config = get_model_config(args.model)
    base = count_base(config)
    if args.adapter is None:
        if args.json:
            print(json.dumps(base.as_dict(), indent=2, sort_keys=True))
            return 0
        print(f"model {args.model}: {base.total:,} parameters ({base.human})")
        print(base.format_table())
        return 0
    spec = parse_adapter_spec(args.adapter, n_layers=config.n_layers)
    report = count(config, spec)
    if args.json:
        out = report.as_dict()
        out["base_total"] = base.total
        print(json.dumps(out, indent=2, sort_keys=True))
        return 0
    share = 100.0 * report.total / base.total
    print(f"model {args.model}, adapter {format_adapter_spec(spec)}:")
    print(f"  trainable {report.total:,} ({report.human}), {share:.4f}% of base")
    if report.gate_params:
        print(f"  plus {report.gate_params:,} gate scalars kept out of the headline count")
    print(report.format_table())
    return 0


# --- gen-task -----------------------------------------------------------------

def _cmd_gen_task(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.task == "lm":
        family = build_language_family(args.languages, args.anchor_fraction, args.seed)
        corpus = build_pretrain_corpus(family, args.n, args.seed)
        path = out_dir / "lm.jsonl"
        n = save_jsonl(path, corpus)
        print(f"wrote {n} examples to {path}")
        return 0
    per_lang = gen_task(args.task, args.n, args.languages, seed=args.seed,
                        anchor_fraction=args.anchor_fraction)
    for lang, examples in sorted(per_lang.items()):
        path = out_dir / f"{args.task}.{lang}.jsonl"
        n = save_jsonl(path, examples)
        print(f"wrote {n} examples to {path}")
    return 0


# --- train --------------------------------------------------------------------

def _cmd_train(args) -> int:
    file_cfg = _read_config_file(args.config) if args.config else {}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    full_ft = args.full_ft or bool(_pick(None, file_cfg, "full_finetune", False, bool))
    adapter_text = _pick(args.adapter, file_cfg, "adapter")
    if full_ft and adapter_text:
        raise ConfigError("pick one of --adapter and --full-ft, not both")
    if not full_ft and not adapter_text:
        raise ConfigError("train needs --adapter or --full-ft")

    data_paths = list(args.data) if args.data else file_cfg.get("data")
    if isinstance(data_paths, str):
        data_paths = [p for p in data_paths.split(",") if p]
    if not data_paths:
        raise ConfigError("train needs at least one --data file")
    data_paths = [str(Path(p).resolve()) for p in data_paths]

    weights, model_name, weights_path, init_seed = _resolve_base(args, file_cfg)
    config = weights.config
    weights.set_trainable(full_ft)

    defaults = dict(FULL_FT_DEFAULTS) if full_ft else {}
    fields = {}
    for key, kind in _TRAIN_FIELDS.items():
        flag = getattr(args, key, None)
        value = _pick(flag, file_cfg, key, defaults.get(key), kind)
        if value is not None:
            fields[key] = value
    train_cfg = TrainConfig(full_finetune=full_ft, **fields)

    mask_mode = _pick(args.mask, file_cfg, "mask", "response")
    if mask_mode not in ("response", "all"):
        raise ConfigError(f"mask must be response or all, got {mask_mode!r}")

    examples = _load_data(data_paths)
    encoded = []
    for ex in examples:
        tokens, mask = encode_example(ex)
        if mask_mode == "all":
            mask = np.ones(len(tokens), dtype=bool)
            mask[0] = False
        encoded.append((tokens, mask))

    adapter_seed = int(_pick(args.adapter_seed, file_cfg, "adapter_seed", 0, int))
    if full_ft:
        spec, state, attachment = None, None, None
        trainables = list(weights.named())
    else:
        spec = parse_adapter_spec(adapter_text, n_layers=config.n_layers)
        state = init_adapter_state(config, spec, adapter_seed)
        attachment = attach(weights, spec, state)
        trainables = trainable_parameters(config, spec, state)

    started = time.perf_counter()
    log = train(weights, attachment, trainables, encoded, train_cfg)
    runtime = time.perf_counter() - started

    if full_ft:
        out_file = out_dir / "weights.bin"
        save_weights(out_file, weights)
    else:
        out_file = out_dir / "adapter.bin"
        save_adapter(out_file, config, spec, state)
    log_file = out_dir / "train_log.csv"
    log.write_csv(log_file)

    manifest = {
        "command": "train",
        "model": model_name,
        "model_config": config.as_dict(),
        "weights": weights_path,
        "init_seed": None if weights_path else init_seed,
        "adapter": None if full_ft else format_adapter_spec(spec),
        "adapter_seed": None if full_ft else adapter_seed,
        "full_finetune": full_ft,
        "mask": mask_mode,
        "data": data_paths,
        "train": train_cfg.as_dict(),
        "inputs": {p: _sha256(Path(p)) for p in data_paths},
        "outputs": {out_file.name: _sha256(out_file), log_file.name: _sha256(log_file)},
        "runtime_seconds": round(runtime, 3),
    }
    _write_manifest(out_dir, manifest)

    s = log.summary()
    print(f"trained {len(trainables)} tensors for {s['n_steps']} steps; "
          f"final loss {s['final_loss']:.4f}")
    print(f"wrote {out_file}, {log_file}, {out_dir / 'manifest.json'}")
    return 0


# --- eval ---------------------------------------------------------------------

def _cmd_eval(args) -> int:
    file_cfg = _read_config_file(args.config) if args.config else {}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    data_paths = list(args.data) if args.data else file_cfg.get("data")
    if isinstance(data_paths, str):
        data_paths = [p for p in data_paths.split(",") if p]
    if not data_paths:
        raise ConfigError("eval needs at least one --data file")
    data_paths = [str(Path(p).resolve()) for p in data_paths]

    adapter_file = _pick(args.adapter_file, file_cfg, "adapter_file")
    if adapter_file:
        adapter_file = str(Path(adapter_file).resolve())
        adapter_config, spec, state = load_adapter(adapter_file)
        weights, model_name, weights_path, init_seed = _resolve_base(
            args, file_cfg, required_config=adapter_config)
        attachment = attach(weights, spec, state)
    else:
        weights, model_name, weights_path, init_seed = _resolve_base(args, file_cfg)
        attachment = None

    decode = DecodeConfig(
        temperature=float(_pick(args.temperature, file_cfg, "temperature", 0.0, float)),
        top_p=float(_pick(args.top_p, file_cfg, "top_p", 1.0, float)),
        max_new_tokens=int(_pick(args.max_new, file_cfg, "max_new_tokens", 12, int)),
        eos_id=EOS_ID,
        seed=int(_pick(args.decode_seed, file_cfg, "decode_seed", 0, int)),
    )

    examples = _load_data(data_paths)
    started = time.perf_counter()
    report = evaluate(weights, attachment, examples, decode)
    runtime = time.perf_counter() - started

    report_json = out_dir / "report.json"
    report_json.write_text(report.to_json() + "\n", encoding="utf-8")
    report_csv = out_dir / "report.csv"
    report.write_csv(report_csv)

    manifest = {
        "command": "eval",
        "model": model_name,
        "model_config": weights.config.as_dict(),
        "weights": weights_path,
        "init_seed": None if weights_path else init_seed,
        "adapter_file": adapter_file,
        "data": data_paths,
        "decode": decode.as_dict(),
        "inputs": {p: _sha256(Path(p)) for p in data_paths},
        "outputs": {report_json.name: _sha256(report_json),
                    report_csv.name: _sha256(report_csv)},
        "runtime_seconds": round(runtime, 3),
    }
    _write_manifest(out_dir, manifest)

    print(f"task {report.task}, adapter {report.adapter}")
    print(report.format_table())
    print(f"wrote {report_json}, {report_csv}, {out_dir / 'manifest.json'}")
    return 0


# --- gradcheck ------------------------------------------------------------------

def _cmd_gradcheck(args) -> int:
    config = get_model_config(args.model)
    weights = init_random(config, args.init_seed)
    weights.set_trainable(False)
    spec = parse_adapter_spec(args.adapter, n_layers=config.n_layers)
    state = init_adapter_state(config, spec, args.seed)
    # zero-init gates and LoRA B matrices hide their own gradient paths, so
    # the audit perturbs every tensor away from the exact zeros first
    rng = np.random.default_rng(args.seed + 1)
    for t in state.values():
        t.data += rng.normal(0.0, 0.05, size=t.data.shape)
    attachment = attach(weights, spec, state)

    family = build_language_family(1, 0.5, args.seed)
    example = gen_task("nli3", 1, family, seed=args.seed)[0][0]
    tokens, mask = encode_example(example)
    kwargs = attachment.forward_kwargs()
    n_pre = attachment.n_prepended

    def loss_fn(params):
        logits = forward(weights, tokens[:-1], **kwargs)
        if n_pre:
            logits = narrow(logits, 0, n_pre, len(tokens) - 1)
        return cross_entropy(logits, tokens[1:], mask[1:])

    report = grad_check(loss_fn, state, eps=args.eps, tol=args.tol,
                        max_entries=args.max_entries, seed=args.seed)
    print(report.format_table())
    if not report.passed:
        raise NumericError(
            f"gradient audit failed: worst relative error {report.worst:.3e} "
            f"above tolerance {report.tol:g}")
    print(f"all gradients within {report.tol:g} (worst {report.worst:.3e})")
    return 0


# --- argument surface -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peft-forge",
                                     description="parameter-efficient tuning workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="symbolic trainable-parameter counts")
    p.add_argument("--model", required=True, help=", ".join(sorted(BUILTIN_MODELS)))
    p.add_argument("--adapter", help="adapter spec, e.g. lora:r=4 or prefix:k=10,layers=30")
    p.add_argument("--json", action="store_true", help="also print the report as JSON")
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("gen-task", help="write synthetic task JSONL files")
    p.add_argument("--task", required=True, choices=TASKS + ("lm",))
    p.add_argument("--n", type=int, required=True, help="instances per language")
    p.add_argument("--languages", type=int, default=4)
    p.add_argument("--anchor-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_task)

    p = sub.add_parser("train", help="fit an adapter or the full model")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", action="append", help="JSONL file, repeatable")
    p.add_argument("--config", help="key=value file or a previous manifest.json")
    p.add_argument("--model", help="builtin config name")
    p.add_argument("--weights", help="base weights file")
    p.add_argument("--init-seed", type=int, dest="init_seed")
    p.add_argument("--adapter", help="adapter spec string")
    p.add_argument("--adapter-seed", type=int, dest="adapter_seed")
    p.add_argument("--full-ft", action="store_true", dest="full_ft",
                   help="train every base weight instead of an adapter")
    p.add_argument("--mask", choices=("response", "all"))
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--optimizer", choices=("adamw", "sgd"))
    p.add_argument("--schedule", choices=("constant", "cosine"), dest="lr_schedule")
    p.add_argument("--warmup-ratio", type=float, dest="warmup_ratio")
    p.add_argument("--grad-clip", type=float, dest="grad_clip")
    p.add_argument("--seed", type=int, help="data order seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="generate and score answers")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", action="append", help="JSONL file, repeatable")
    p.add_argument("--config", help="key=value file or a previous manifest.json")
    p.add_argument("--adapter-file", dest="adapter_file", help="trained adapter.bin")
    p.add_argument("--model", help="builtin config name")
    p.add_argument("--weights", help="base weights file")
    p.add_argument("--init-seed", type=int, dest="init_seed")
    p.add_argument("--max-new", type=int, dest="max_new")
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float, dest="top_p")
    p.add_argument("--decode-seed", type=int, dest="decode_seed")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--model", default="toy")
    p.add_argument("--adapter", default="llama_adapter:k=4,layers=2")
    p.add_argument("--init-seed", type=int, default=0, dest="init_seed")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=40, dest="max_entries")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except PeftForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
