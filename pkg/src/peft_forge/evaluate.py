"""Generation-based evaluation over per-language example sets.

Each example is rendered to its prompt, decoded (greedy by default), and the
generated text is scored against the reference with the task's metrics. The
report keeps raw [0, 1] values keyed by language plus an unweighted mean over
languages; CSV and table output scale by 100 for reading.

Language shards run on a small thread pool when PEFT_FORGE_THREADS asks for
one. Decoding outside a graph context never touches the autodiff tape, and
every worker draws from its own generator, so sharding cannot change the
numbers; results are merged in language order regardless of completion order.

Wall time is tracked on the report object but stays out of `to_json`, which
keeps report files byte-identical across reruns of the same configuration.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import metrics, templates
from .adapters import Attachment
from .errors import ConfigError, DataError
from .model import BaseWeights, generate
from .sampling import DecodeConfig
from .tasks import Example, render_prompt
from .tokenizer import EOS_ID, get_tokenizer

THREADS_ENV = "PEFT_FORGE_THREADS"


def default_decode() -> DecodeConfig:
    return DecodeConfig(temperature=0.0, top_p=1.0, max_new_tokens=12, eos_id=EOS_ID)


def _thread_budget(n_shards: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {cap}")
    return min(cap, n_shards)


@dataclass
class EvalReport:
    task: str
    adapter: str
    decode: dict
    n_examples: dict[int, int]
    per_language: dict[int, dict[str, float]]
    average: dict[str, float]
    wall_seconds: float = 0.0

    def as_dict(self) -> dict:
        """JSON-ready content; deliberately excludes wall_seconds."""
        return {
            "task": self.task,
            "adapter": self.adapter,
            "decode": self.decode,
            "n_examples": {str(k): v for k, v in self.n_examples.items()},
            "per_language": {str(k): dict(sorted(v.items()))
                             for k, v in self.per_language.items()},
            "average": dict(sorted(self.average.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("adapter,language,metric,value\n")
            for lang in sorted(self.per_language):
                for name, value in sorted(self.per_language[lang].items()):
                    fh.write(f"{self.adapter},{lang},{name},{value * 100:.2f}\n")
            for name, value in sorted(self.average.items()):
                fh.write(f"{self.adapter},avg,{name},{value * 100:.2f}\n")

    def format_table(self) -> str:
        names = sorted(self.average)
        head = "language  " + "  ".join(f"{n:>12}" for n in names)
        lines = [head, "-" * len(head)]
        for lang in sorted(self.per_language):
            row = self.per_language[lang]
            lines.append(f"{lang:<8}  " + "  ".join(f"{row[n] * 100:12.2f}" for n in names))
        lines.append(f"{'avg':<8}  " + "  ".join(f"{self.average[n] * 100:12.2f}" for n in names))
        return "\n".join(lines)


def _score(metric: str, prediction: str, reference: str,
           tpl: templates.TaskTemplate) -> float:
    if metric == "accuracy":
        return metrics.accuracy(prediction, reference, tpl.n_labels)
    if metric == "token_f1":
        return metrics.token_f1(prediction, reference)
    if metric == "exact_match":
        return metrics.exact_match(prediction, reference)
    if metric == "maj_at_1":
        return metrics.maj_at_1(prediction, reference)
    raise ConfigError(f"unknown metric {metric!r}")


def _eval_shard(weights: BaseWeights, attachment: Attachment | None,
                examples: Sequence[Example], decode: DecodeConfig,
                tpl: templates.TaskTemplate) -> dict[str, float]:
    tok = get_tokenizer()
    sums = {m: 0.0 for m in tpl.metrics}
    for ex in examples:
        ids, _ = render_prompt(ex)
        new_tokens = generate(weights, attachment, ids, decode)
        text = tok.decode(new_tokens)
        for m in tpl.metrics:
            sums[m] += _score(m, text, ex.response, tpl)
    return {m: s / len(examples) for m, s in sums.items()}


def evaluate(weights: BaseWeights, attachment: Attachment | None,
             examples: Mapping[int, Sequence[Example]] | Sequence[Example],
             decode: DecodeConfig | None = None) -> EvalReport:
    """Score generated answers per language and on average.

    `examples` is either {language: examples} or a flat list (grouped by each
    example's language tag). All examples must share one task.
    """
    if decode is None:
        decode = default_decode()
    if not isinstance(examples, Mapping):
        grouped: dict[int, list[Example]] = {}
        for ex in examples:
            grouped.setdefault(ex.language, []).append(ex)
        examples = grouped
    if not examples or any(len(v) == 0 for v in examples.values()):
        raise DataError("evaluation needs at least one example per language")

    tasks = {ex.task for shard in examples.values() for ex in shard}
    if len(tasks) != 1:
        raise DataError(f"evaluation set mixes tasks: {', '.join(sorted(tasks))}")
    task = tasks.pop()
    tpl = templates.get_template(task)

    langs = sorted(examples)
    started = time.perf_counter()
    n_threads = _thread_budget(len(langs))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = {lang: pool.submit(_eval_shard, weights, attachment,
                                         examples[lang], decode, tpl)
                       for lang in langs}
            per_language = {lang: futures[lang].result() for lang in langs}
    else:
        per_language = {lang: _eval_shard(weights, attachment, examples[lang], decode, tpl)
                        for lang in langs}
    wall = time.perf_counter() - started

    average = {m: float(np.mean([per_language[lang][m] for lang in langs]))
               for m in tpl.metrics}
    label = attachment.label if attachment is not None else "base"
    return EvalReport(task=task, adapter=label, decode=decode.as_dict(),
                      n_examples={lang: len(examples[lang]) for lang in langs},
                      per_language=per_language, average=average,
                      wall_seconds=wall)
