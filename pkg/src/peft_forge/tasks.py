"""Synthetic cross-lingual tasks over a shared concept space.

A "language" is a bijective relabeling of a content-vocabulary slice: every
language expresses the same concept inventory, anchor concepts keep the same
surface token everywhere (the shared-vocabulary fraction), and each language
owns a private token block for the rest. Instances are generated once in
concept space and surfaced per language, so the language variants of one
instance differ only by the relabeling outside the anchor set and are
otherwise character-identical.

Language 0 is the source language. Because non-anchor blocks are disjoint, a
stream filtered to language 0 contains no other language's surface tokens
outside the anchors, which is what makes "train on language 0, evaluate on
the rest" a genuine zero-shot test.

Tasks:

* nli3: fixed-length premise (6 words) and hypothesis (3). Entailment copies
  the premise head, contradiction negates a copied head with a reserved
  negation word, neutral draws fresh words. Labels 1..3.
* span_qa: 8-word context; the answer is the two words following the question
  word. The response is always a substring of the context.
* mc4: 6-word passage; the correct choice is the word following the question
  word in the passage, distractors never occur in the passage. Labels 1..4.
* arith: two-operand addition. Digits are byte tokens, hence shared across
  languages by construction.

`build_pretrain_corpus` additionally emits task="lm" examples for base-model
warmup: patterned sentences (teaching token-matching attention) mixed with
task-formatted text whose answers are resampled at random (teaching the
response scaffold without leaking any task rule).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import templates
from .errors import ConfigError, DataError
from .tokenizer import EOS_ID, get_tokenizer
from .training import loss_mask

DEFAULT_N_CONCEPTS = 64
NEGATION_CONCEPT = 0  # reserved; never sampled as ordinary content

PREMISE_LEN = 6
HYPOTHESIS_LEN = 3
CONTEXT_LEN = 8
SPAN_LEN = 2
PASSAGE_LEN = 6

TASKS = ("nli3", "span_qa", "mc4", "arith")


@dataclass(frozen=True)
class Example:
    """One supervised instance: an input block, the expected response text,
    and the language and task tags. `prompt` holds only the task input; the
    instruction scaffold is added at render time."""

    prompt: str
    response: str
    language: int
    task: str


@dataclass(frozen=True)
class SyntheticLanguage:
    """One language: a relabeling of the content slice, identity on anchors."""

    lang_id: int
    permutation: dict[int, int]   # canonical token id -> surface token id
    anchors: frozenset[int]       # token ids surfaced identically everywhere

    def surface(self, canonical_token: int) -> int:
        return self.permutation[canonical_token]


@dataclass(frozen=True)
class LanguageFamily:
    """A set of parallel languages plus the concept -> canonical-token table."""

    languages: tuple[SyntheticLanguage, ...]
    concept_tokens: tuple[int, ...]  # concept index -> language-0 token id
    n_anchors: int

    def __len__(self) -> int:
        return len(self.languages)

    def __getitem__(self, lang: int) -> SyntheticLanguage:
        return self.languages[lang]

    @property
    def n_concepts(self) -> int:
        return len(self.concept_tokens)

    def word(self, concept: int, lang: int) -> str:
        tok = get_tokenizer()
        return tok.content_word(self.languages[lang].surface(self.concept_tokens[concept]))

    def words(self, concepts: Iterable[int], lang: int) -> str:
        return " ".join(self.word(c, lang) for c in concepts)

    def sampleable_concepts(self) -> range:
        # Concept 0 is the negation marker; ordinary content starts at 1.
        return range(1, self.n_concepts)


def build_language_family(n_languages: int, anchor_fraction: float = 0.5, seed: int = 0,
                          n_concepts: int = DEFAULT_N_CONCEPTS) -> LanguageFamily:
    """Build `n_languages` parallel languages sharing `anchor_fraction` of the
    concept vocabulary.

    Concepts map to distinct content tokens. The first `round(fraction * n)`
    concepts are anchors (same token in every language); every language gets a
    private token block for the rest, so the family needs
    `n_anchors + n_languages * (n_concepts - n_anchors)` content tokens.
    """
    if n_languages < 1:
        raise ConfigError(f"need at least one language, got {n_languages}")
    if not (0.0 <= anchor_fraction <= 1.0):
        raise ConfigError(f"anchor_fraction must lie in [0, 1], got {anchor_fraction}")
    if n_concepts < 8:
        raise ConfigError(f"need at least 8 concepts, got {n_concepts}")
    tok = get_tokenizer()
    slice_ids = list(tok.content_ids())
    n_anchors = round(anchor_fraction * n_concepts)
    n_private = n_concepts - n_anchors
    needed = n_anchors + n_languages * n_private
    if needed > len(slice_ids):
        raise ConfigError(
            f"content-vocabulary slice ({len(slice_ids)} tokens) is smaller than the "
            f"permutation domain ({needed} tokens for {n_languages} languages, "
            f"{n_concepts} concepts, anchor fraction {anchor_fraction})"
        )
    rng = random.Random(f"family:{seed}")
    shuffled = slice_ids.copy()
    rng.shuffle(shuffled)
    anchors = shuffled[:n_anchors]
    blocks = [shuffled[n_anchors + l * n_private: n_anchors + (l + 1) * n_private]
              for l in range(n_languages)]
    used = shuffled[:needed]

    languages = []
    for l in range(n_languages):
        perm = {t: t for t in used}
        for a, b in zip(blocks[0], blocks[l]):
            perm[a], perm[b] = b, a
        languages.append(SyntheticLanguage(lang_id=l, permutation=perm,
                                           anchors=frozenset(anchors)))
    concept_tokens = tuple(anchors + blocks[0])
    return LanguageFamily(languages=tuple(languages), concept_tokens=concept_tokens,
                          n_anchors=n_anchors)


# --- concept-space instance generators ---------------------------------------
#
# Each returns a dict of concept-index fields; surfacing happens afterwards so
# one instance yields parallel examples in every language.

def _gen_nli3(rng: random.Random, family: LanguageFamily) -> dict:
    pool = family.sampleable_concepts()
    premise = rng.sample(pool, PREMISE_LEN)
    label = rng.randint(1, 3)
    if label == 1:
        hypothesis = premise[:HYPOTHESIS_LEN]
    elif label == 3:
        hypothesis = [NEGATION_CONCEPT] + premise[:HYPOTHESIS_LEN - 1]
    else:
        rest = [c for c in pool if c not in premise]
        hypothesis = rng.sample(rest, HYPOTHESIS_LEN)
    return {"premise": premise, "hypothesis": hypothesis, "label": label}


def _gen_span_qa(rng: random.Random, family: LanguageFamily) -> dict:
    pool = family.sampleable_concepts()
    context = rng.sample(pool, CONTEXT_LEN)
    start = rng.randint(1, CONTEXT_LEN - SPAN_LEN)
    return {"context": context, "question": context[start - 1],
            "span": context[start:start + SPAN_LEN]}


def _gen_mc4(rng: random.Random, family: LanguageFamily) -> dict:
    pool = family.sampleable_concepts()
    passage = rng.sample(pool, PASSAGE_LEN)
    pos = rng.randint(1, PASSAGE_LEN - 1)
    question, correct = passage[pos - 1], passage[pos]
    rest = [c for c in pool if c not in passage]
    distractors = rng.sample(rest, 3)
    choices = [correct] + distractors
    rng.shuffle(choices)
    return {"passage": passage, "question": question, "choices": choices,
            "label": choices.index(correct) + 1}


def _gen_arith(rng: random.Random, family: LanguageFamily) -> dict:
    a, b = rng.randint(2, 49), rng.randint(2, 49)
    return {"a": a, "b": b, "answer": a + b}


def _surface_nli3(inst: dict, family: LanguageFamily, lang: int) -> tuple[str, str]:
    block = (f"Premise:\n{family.words(inst['premise'], lang)}"
             f"\nHypothesis:\n{family.words(inst['hypothesis'], lang)}")
    return block, str(inst["label"])


def _surface_span_qa(inst: dict, family: LanguageFamily, lang: int) -> tuple[str, str]:
    block = (f"Context:\n{family.words(inst['context'], lang)}"
             f"\nQuestion:\n{family.word(inst['question'], lang)}")
    return block, family.words(inst["span"], lang)


def _surface_mc4(inst: dict, family: LanguageFamily, lang: int) -> tuple[str, str]:
    choices = "\n".join(f"{i}. {family.word(c, lang)}"
                        for i, c in enumerate(inst["choices"], 1))
    block = (f"Passage:\n{family.words(inst['passage'], lang)}"
             f"\nQuestion:\n{family.word(inst['question'], lang)}"
             f"\nChoices:\n{choices}")
    return block, str(inst["label"])


def _surface_arith(inst: dict, family: LanguageFamily, lang: int) -> tuple[str, str]:
    return f"Question:\n{inst['a']} + {inst['b']} =", str(inst["answer"])


_GENERATORS = {"nli3": (_gen_nli3, _surface_nli3),
               "span_qa": (_gen_span_qa, _surface_span_qa),
               "mc4": (_gen_mc4, _surface_mc4),
               "arith": (_gen_arith, _surface_arith)}


def gen_task(task: str, n: int, family: LanguageFamily | int, seed: int = 0,
             anchor_fraction: float = 0.5) -> dict[int, list[Example]]:
    """Generate `n` parallel instances of `task` in every family language.

    `family` may be a LanguageFamily or a language count (a family is then
    built from `seed` and `anchor_fraction`). Returns {lang_id: examples};
    examples at the same index are translations of one instance.
    """
    if task not in _GENERATORS:
        raise DataError(f"unknown task {task!r}, expected one of {', '.join(TASKS)}")
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    if isinstance(family, int):
        family = build_language_family(family, anchor_fraction, seed)
    gen, surface = _GENERATORS[task]
    rng = random.Random(f"{task}:{seed}")
    out: dict[int, list[Example]] = {lang.lang_id: [] for lang in family.languages}
    for _ in range(n):
        inst = gen(rng, family)
        for lang in family.languages:
            block, response = surface(inst, family, lang.lang_id)
            out[lang.lang_id].append(Example(prompt=block, response=response,
                                             language=lang.lang_id, task=task))
    return out


# --- rendering and encoding ---------------------------------------------------

def render_prompt(example: Example) -> tuple[list[int], int]:
    """Token ids of the full prompt (scaffold included, response excluded) and
    the index where the response will start."""
    text = templates.render_text(example.task, example.prompt)
    ids = get_tokenizer().encode(text)
    return ids, len(ids)


def response_delimiter(task: str) -> list[int]:
    """Token ids of the scaffold run that separates prompt from response."""
    return get_tokenizer().encode(templates.response_scaffold(task))


def encode_example(example: Example) -> tuple[np.ndarray, np.ndarray]:
    """Tokens and response-only loss mask for one training example."""
    if example.task == "lm":
        ids = get_tokenizer().encode(example.response) + [EOS_ID]
        mask = np.ones(len(ids), dtype=bool)
        mask[0] = False
        return np.asarray(ids, dtype=np.int64), mask
    validate_example(example)
    tpl = templates.get_template(example.task)
    prompt_ids, _ = render_prompt(example)
    continuation = tpl.wrap.format(example.response)
    ids = prompt_ids + get_tokenizer().encode(continuation) + [EOS_ID]
    tokens = np.asarray(ids, dtype=np.int64)
    mask = loss_mask(tokens, response_delimiter(example.task),
                     source=f"{example.task} example")
    return tokens, mask


def validate_example(example: Example) -> None:
    """Schema checks shared by the generator output and JSONL loading."""
    if example.task == "lm":
        if not example.response:
            raise DataError("lm example with empty text")
        return
    if example.task not in _GENERATORS:
        raise DataError(f"unknown task {example.task!r}, "
                        f"expected one of {', '.join(TASKS)}")
    if not isinstance(example.language, int) or example.language < 0:
        raise DataError(f"bad language id {example.language!r}")
    tpl = templates.get_template(example.task)
    for label in tpl.input_labels:
        # leading newline so the first label matches at the start of the block
        if label not in ("\n" + example.prompt):
            raise DataError(f"{example.task} prompt is missing the "
                            f"{label.strip()} field")
    if tpl.n_labels is not None:
        if not example.response.isdigit() or not (1 <= int(example.response) <= tpl.n_labels):
            raise DataError(f"{example.task} response must be a label in "
                            f"1..{tpl.n_labels}, got {example.response!r}")
    if example.task == "span_qa":
        context = example.prompt.split("Context:\n", 1)[-1].split("\nQuestion:", 1)[0]
        if example.response not in context:
            raise DataError(f"span_qa response {example.response!r} is not a "
                            "substring of the context")
    if example.task == "arith" and not example.response.lstrip("-").isdigit():
        raise DataError(f"arith response must be an integer, got {example.response!r}")


# --- JSONL persistence ---------------------------------------------------------

_FIELDS = ("prompt", "response", "language", "task")


def save_jsonl(path: str | Path, examples: Iterable[Example]) -> int:
    """Write one JSON object per line; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"prompt": ex.prompt, "response": ex.response,
                                 "language": ex.language, "task": ex.task},
                                ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def iter_jsonl(path: str | Path) -> Iterator[Example]:
    """Stream examples from a JSONL file, validating each line."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}, line {lineno}: not valid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}, line {lineno}: expected an object")
            missing = [f for f in _FIELDS if f not in obj]
            if missing:
                raise DataError(f"{path}, line {lineno}: missing field "
                                f"{', '.join(missing)}")
            ex = Example(prompt=str(obj["prompt"]), response=str(obj["response"]),
                         language=int(obj["language"]), task=str(obj["task"]))
            try:
                validate_example(ex)
            except DataError as exc:
                raise DataError(f"{path}, line {lineno}: {exc}") from exc
            yield ex


def load_jsonl(path: str | Path) -> list[Example]:
    return list(iter_jsonl(path))


# --- base-model warmup corpus --------------------------------------------------

def build_pretrain_corpus(family: LanguageFamily, n: int, seed: int = 0,
                          pattern_fraction: float = 0.5) -> list[Example]:
    """Warmup text for the base model, mixing all family languages.

    Three streams. By `pattern_fraction`, patterned sentences whose words
    repeat with short periods, so the model learns to attend to earlier
    copies of the current token. The rest is task text split two ways: plain
    "{block}\\n>> {answer}" lines with correct answers in every language, the
    desk-scale analogue of the task-shaped text a web corpus already
    contains, and instruction-scaffolded renderings whose answers are
    resampled at random. The scaffold never co-occurs with a correct answer,
    so the base knows the format and holds the competence but has not bound
    the two; adapter training supplies exactly that binding.
    """
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    rng = random.Random(f"pretrain:{seed}")
    pool = family.sampleable_concepts()
    out: list[Example] = []
    for _ in range(n):
        lang = rng.randrange(len(family))
        if rng.random() < pattern_fraction:
            if rng.random() < 0.35:
                # refrain shape: a word list restated after a short gap, the
                # long-range copy the comprehension tasks lean on
                k = rng.randint(4, 8)
                phrase = rng.sample(pool, k)
                gap = [rng.choice(pool) for _ in range(rng.randint(0, 3))]
                seq = phrase + gap + phrase
                if rng.random() < 0.5:
                    seq = seq + gap + phrase
            else:
                period = rng.randint(2, 6)
                motif = rng.sample(pool, period)
                reps = rng.randint(3, 6)
                seq = []
                for _ in range(reps):
                    seq.extend(motif)
                    if rng.random() < 0.3:
                        seq.append(rng.choice(pool))
            text = family.words(seq, lang)
        else:
            # the 3-way entailment rule is the slowest to emerge, so it gets
            # double weight in the task stream
            task = rng.choice(TASKS + ("nli3",))
            gen, surface = _GENERATORS[task]
            inst = gen(rng, family)
            if rng.random() < SCAFFOLD_FRACTION:
                inst = _randomize_answer(inst, task, rng, family)
                block, response = surface(inst, family, lang)
                tpl = templates.get_template(task)
                text = templates.render_text(task, block) + tpl.wrap.format(response)
            else:
                block, response = surface(inst, family, lang)
                text = f"{block}\n>> {response}"
        out.append(Example(prompt="", response=text, language=lang, task="lm"))
    return out


# Of the task-text stream, how much is instruction-scaffolded (with random
# answers) rather than plain answered text.
SCAFFOLD_FRACTION = 1 / 3


def _randomize_answer(inst: dict, task: str, rng: random.Random,
                      family: LanguageFamily) -> dict:
    """Replace the instance's answer with an uninformative random one."""
    inst = dict(inst)
    if task == "nli3":
        inst["label"] = rng.randint(1, 3)
        if rng.random() < 0.5:  # decouple hypothesis shape from the label too
            pool = family.sampleable_concepts()
            inst["hypothesis"] = rng.sample(pool, HYPOTHESIS_LEN)
    elif task == "span_qa":
        start = rng.randint(0, CONTEXT_LEN - SPAN_LEN)
        inst["span"] = inst["context"][start:start + SPAN_LEN]
    elif task == "mc4":
        inst["label"] = rng.randint(1, 4)
    elif task == "arith":
        inst["answer"] = rng.randint(4, 98)
    return inst
