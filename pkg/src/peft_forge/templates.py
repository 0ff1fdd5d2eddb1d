"""Instruction templates for the four built-in tasks.

Every prompt is the shared preamble, a task instruction, the example's input
block, then the response scaffold ("### Response:" plus the task's cue). The
model is supervised (and later sampled) strictly after the scaffold. The
tokenizer reserves one vocabulary entry per fixed template string, so the
boilerplate costs a handful of tokens instead of hundreds of bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError

PREAMBLE = (
    "Below is an instruction that describes a task, paired with an input "
    "that provides further context. Write a response that appropriately "
    "completes the request.\n\n### Instruction:\n"
)

INPUT_HEADER = "\n\n### Input:\n"
RESPONSE_MARKER = "\n\n### Response:"

NLI_INSTRUCTION = (
    "The task is to solve Natural Language Inference (NLI) problems. NLI is "
    "the task of determining whether the inference relation between the "
    "second sentence (Hypothesis) with respect to the first sentence "
    "(Premise) is one of the following:\n"
    "1. Entailment\n2. Neutral\n3. Contradiction\n"
    "Output the relation number only."
)

QA_INSTRUCTION = (
    "You will answer reading comprehension questions using information from "
    "a provided passage. Extract the exact answer from the passage without "
    "modification and present it in the following structured format:\n\n"
    "{'answer' : <Extracted Answer>}"
)

MC_INSTRUCTION = (
    "The task is to perform a reading comprehension task. Given the "
    "following passage, question, and answer choices, output the number "
    "corresponding to the correct answer only."
)

ARITH_INSTRUCTION = (
    "The task is to solve the arithmetic problem. State the final numeric answer."
)


@dataclass(frozen=True)
class TaskTemplate:
    name: str
    instruction: str
    input_labels: tuple[str, ...]
    cue: str
    wrap: str            # response text -> supervised continuation, via .format
    n_labels: int | None  # classification label range, when applicable
    metrics: tuple[str, ...]


TEMPLATES: dict[str, TaskTemplate] = {
    "nli3": TaskTemplate(
        name="nli3",
        instruction=NLI_INSTRUCTION,
        input_labels=("Premise:\n", "\nHypothesis:\n"),
        cue=" The relation number is",
        wrap=" {}",
        n_labels=3,
        metrics=("accuracy",),
    ),
    "span_qa": TaskTemplate(
        name="span_qa",
        instruction=QA_INSTRUCTION,
        input_labels=("Context:\n", "\nQuestion:\n"),
        cue="\n{{'answer':",
        wrap=" '{}'}}",
        n_labels=None,
        metrics=("token_f1", "exact_match"),
    ),
    "mc4": TaskTemplate(
        name="mc4",
        instruction=MC_INSTRUCTION,
        input_labels=("Passage:\n", "\nQuestion:\n", "\nChoices:\n"),
        cue=" The correct choice number is",
        wrap=" {}",
        n_labels=4,
        metrics=("accuracy",),
    ),
    "arith": TaskTemplate(
        name="arith",
        instruction=ARITH_INSTRUCTION,
        input_labels=("Question:\n",),
        cue=" The answer is",
        wrap=" {}.",
        n_labels=None,
        metrics=("maj_at_1",),
    ),
}


def get_template(task: str) -> TaskTemplate:
    tpl = TEMPLATES.get(task)
    if tpl is None:
        raise DataError(f"unknown task {task!r}; known: {', '.join(sorted(TEMPLATES))}")
    return tpl


def _literal(s: str) -> str:
    # cue/wrap strings are format templates; braces arrive doubled
    return s.replace("{{", "{").replace("}}", "}")


def response_scaffold(task: str) -> str:
    """Literal text separating the input block from the supervised response."""
    return RESPONSE_MARKER + _literal(get_template(task).cue)


def render_text(task: str, input_block: str) -> str:
    """The full prompt string: preamble, instruction, input block, response scaffold."""
    tpl = get_template(task)
    for label in tpl.input_labels:
        if label not in input_block:
            raise DataError(f"{task} example is missing the {label.strip()!r} field")
    return PREAMBLE + tpl.instruction + INPUT_HEADER + input_block + response_scaffold(task)


def scaffold_strings() -> list[str]:
    """Fixed strings the tokenizer should treat as single vocabulary entries."""
    cues = []
    labels = []
    for tpl in TEMPLATES.values():
        cues.append(_literal(tpl.cue))
        labels.extend(tpl.input_labels)
    seen = set()
    ordered = []
    for s in ([PREAMBLE, NLI_INSTRUCTION, QA_INSTRUCTION, MC_INSTRUCTION, ARITH_INSTRUCTION,
               INPUT_HEADER, RESPONSE_MARKER] + cues + labels):
        if s not in seen:
            seen.add(s)
            ordered.append(s)
    return ordered
