"""Synthetic cross-lingual tasks: family construction, translation parity,
task semantics, encoding, and JSONL persistence."""

import dataclasses
from collections import Counter

import numpy as np
import pytest

from peft_forge import templates
from peft_forge.errors import ConfigError, DataError
from peft_forge.tasks import (
    NEGATION_CONCEPT,
    TASKS,
    Example,
    build_language_family,
    build_pretrain_corpus,
    encode_example,
    gen_task,
    iter_jsonl,
    load_jsonl,
    render_prompt,
    response_delimiter,
    save_jsonl,
    validate_example,
)
from peft_forge.tokenizer import EOS_ID, get_tokenizer


@pytest.fixture(scope="module")
def family():
    return build_language_family(3, anchor_fraction=0.5, seed=0)


# --- language family -----------------------------------------------------------


def test_family_is_seed_deterministic():
    a = build_language_family(3, 0.5, seed=1)
    b = build_language_family(3, 0.5, seed=1)
    c = build_language_family(3, 0.5, seed=2)
    assert a.concept_tokens == b.concept_tokens
    assert all(x.permutation == y.permutation for x, y in zip(a.languages, b.languages))
    assert a.concept_tokens != c.concept_tokens


def test_family_shape(family):
    assert len(family) == 3
    assert family.n_concepts == 64
    assert family.n_anchors == 32
    assert len(set(family.concept_tokens)) == 64
    assert list(family.sampleable_concepts()) == list(range(1, 64))


def test_anchor_words_are_shared_private_words_are_not(family):
    for c in range(family.n_concepts):
        words = {family.word(c, lang) for lang in range(3)}
        if c < family.n_anchors:
            assert len(words) == 1, f"anchor concept {c} split across languages"
        else:
            assert len(words) == 3, f"private concept {c} shared across languages"


def test_private_vocabularies_are_pairwise_disjoint(family):
    privates = []
    for lang in range(3):
        privates.append({family.word(c, lang)
                         for c in range(family.n_anchors, family.n_concepts)})
    assert privates[0].isdisjoint(privates[1])
    assert privates[0].isdisjoint(privates[2])
    assert privates[1].isdisjoint(privates[2])


def test_language_zero_is_the_canonical_surface(family):
    tok = get_tokenizer()
    for c in range(family.n_concepts):
        assert family.word(c, 0) == tok.content_word(family.concept_tokens[c])


def test_family_capacity_limit():
    # 32 anchors + 6 * 32 private tokens = 224 > the 200-word content slice
    with pytest.raises(ConfigError, match="content-vocabulary slice"):
        build_language_family(6, anchor_fraction=0.5)
    build_language_family(5, anchor_fraction=0.5)  # 192 fits


def test_family_argument_validation():
    with pytest.raises(ConfigError):
        build_language_family(0)
    with pytest.raises(ConfigError):
        build_language_family(2, anchor_fraction=1.5)
    with pytest.raises(ConfigError):
        build_language_family(2, n_concepts=4)


# --- generation ------------------------------------------------------------------


def test_gen_task_structure(family):
    data = gen_task("nli3", 7, family)
    assert sorted(data) == [0, 1, 2]
    for lang, examples in data.items():
        assert len(examples) == 7
        for ex in examples:
            assert ex.language == lang and ex.task == "nli3"
            validate_example(ex)


def test_gen_task_is_deterministic(family):
    a = gen_task("mc4", 5, family, seed=3)
    b = gen_task("mc4", 5, family, seed=3)
    c = gen_task("mc4", 5, family, seed=4)
    assert a == b
    assert a != c


def test_gen_task_rejects_bad_input(family):
    with pytest.raises(DataError, match="unknown task"):
        gen_task("qa9", 3, family)
    with pytest.raises(ConfigError):
        gen_task("nli3", 0, family)


def test_full_anchoring_means_identical_translations():
    data = gen_task("nli3", 6, 3, seed=0, anchor_fraction=1.0)
    for i in range(6):
        assert data[0][i].prompt == data[1][i].prompt == data[2][i].prompt
        assert data[0][i].response == data[1][i].response


def test_translations_are_parallel(family):
    """The same instance surfaces in every language: labels match, and the
    word at each position maps through the same concept."""
    data = gen_task("nli3", 20, family, seed=1)
    for i in range(20):
        assert data[0][i].response == data[1][i].response == data[2][i].response
        w0 = data[0][i].prompt.split()
        w1 = data[1][i].prompt.split()
        assert len(w0) == len(w1)
        # position-wise: either both kept an anchor or both swapped privately
        diff0 = [w for w in w0 if w not in w1]
        assert all(w not in w0 for w in w1 if w in diff0)


def test_zero_shot_hygiene(family):
    """Language-0 training text must not leak any other language's private
    vocabulary, or "unseen language" would be meaningless."""
    foreign = set()
    for lang in (1, 2):
        foreign |= {family.word(c, lang)
                    for c in range(family.n_anchors, family.n_concepts)}
    for task in TASKS:
        for ex in gen_task(task, 30, family, seed=2)[0]:
            for w in ex.prompt.replace("\n", " ").split():
                assert w not in foreign, (task, w)


def test_nli3_label_semantics(family):
    data = gen_task("nli3", 60, family, seed=5)
    neg = family.word(NEGATION_CONCEPT, 1)
    for ex in data[1]:
        premise = ex.prompt.split("Premise:\n", 1)[1].split("\nHypothesis:")[0].split()
        hypothesis = ex.prompt.split("Hypothesis:\n", 1)[1].split()
        assert len(premise) == 6 and len(set(premise)) == 6
        assert len(hypothesis) == 3
        label = int(ex.response)
        if label == 1:
            assert hypothesis == premise[:3]
        elif label == 3:
            assert hypothesis[0] == neg
            assert hypothesis[1:] == premise[:2]
        else:
            assert not set(hypothesis) & set(premise)


def test_label_distribution_is_uniform():
    data = gen_task("nli3", 6000, 1, seed=0)
    counts = Counter(ex.response for ex in data[0])
    for label in ("1", "2", "3"):
        assert abs(counts[label] / 6000 - 1 / 3) < 0.02
    data = gen_task("mc4", 6000, 1, seed=0)
    counts = Counter(ex.response for ex in data[0])
    for label in ("1", "2", "3", "4"):
        assert abs(counts[label] / 6000 - 1 / 4) < 0.02


def test_span_answer_follows_the_question_word(family):
    for lang, examples in gen_task("span_qa", 30, family, seed=6).items():
        for ex in examples:
            context = ex.prompt.split("Context:\n", 1)[1].split("\nQuestion:")[0].split()
            question = ex.prompt.split("Question:\n", 1)[1].split()[0]
            pos = context.index(question)
            assert ex.response == " ".join(context[pos + 1:pos + 3])
            assert ex.response in ex.prompt


def test_mc4_correct_choice_comes_from_the_passage(family):
    for lang, examples in gen_task("mc4", 30, family, seed=7).items():
        for ex in examples:
            passage = ex.prompt.split("Passage:\n", 1)[1].split("\nQuestion:")[0].split()
            question = ex.prompt.split("Question:\n", 1)[1].split("\n")[0]
            choices = [line.split(". ", 1)[1]
                       for line in ex.prompt.split("Choices:\n", 1)[1].splitlines()]
            assert len(choices) == 4
            correct = passage[passage.index(question) + 1]
            assert choices[int(ex.response) - 1] == correct
            for w in choices:
                if w != correct:
                    assert w not in passage


def test_arith_is_language_neutral(family):
    data = gen_task("arith", 20, family, seed=8)
    for i in range(20):
        assert data[0][i].prompt == data[1][i].prompt == data[2][i].prompt
        a, rest = data[0][i].prompt.split("Question:\n")[1].split(" + ")
        b = rest.split(" =")[0]
        assert int(data[0][i].response) == int(a) + int(b)
        assert 2 <= int(a) <= 49 and 2 <= int(b) <= 49


# --- rendering and encoding --------------------------------------------------------


def test_render_prompt_roundtrips_and_ends_with_cue(family):
    tok = get_tokenizer()
    for task in TASKS:
        ex = gen_task(task, 1, family, seed=9)[0][0]
        ids, start = render_prompt(ex)
        assert start == len(ids)
        text = tok.decode(ids)
        assert text == templates.render_text(task, ex.prompt)
        assert text.endswith(templates.response_scaffold(task))


def test_encode_example_supervises_only_the_response(family):
    tok = get_tokenizer()
    for task in TASKS:
        ex = gen_task(task, 1, family, seed=10)[0][0]
        tokens, mask = encode_example(ex)
        assert tokens[-1] == EOS_ID and mask[-1]
        assert not mask[0]
        tpl = templates.get_template(task)
        supervised = tok.decode([int(t) for t, m in zip(tokens[:-1], mask[:-1]) if m])
        assert supervised == tpl.wrap.format(ex.response)
        prompt_ids, _ = render_prompt(ex)
        assert not mask[:len(prompt_ids)].any()


def test_encode_lm_example_supervises_everything(family):
    ex = build_pretrain_corpus(family, 1, seed=0)[0]
    tokens, mask = encode_example(ex)
    assert tokens[-1] == EOS_ID
    assert not mask[0]
    assert mask[1:].all()


def test_response_delimiter_is_the_scaffold_tail(family):
    tok = get_tokenizer()
    for task in TASKS:
        delim = response_delimiter(task)
        assert tok.decode(delim) == templates.response_scaffold(task)
        ids, _ = render_prompt(gen_task(task, 1, family, seed=11)[0][0])
        k = len(delim)
        assert ids[-k:] == delim


def test_examples_are_immutable(family):
    ex = gen_task("nli3", 1, family)[0][0]
    with pytest.raises(dataclasses.FrozenInstanceError):
        ex.response = "2"


# --- validation ---------------------------------------------------------------------


def test_validate_rejects_malformed_examples():
    with pytest.raises(DataError, match="missing the Premise"):
        validate_example(Example("Hypothesis:\nx", "1", 0, "nli3"))
    with pytest.raises(DataError, match="label in 1..3"):
        validate_example(Example("Premise:\na\nHypothesis:\nb", "7", 0, "nli3"))
    with pytest.raises(DataError, match="not a substring"):
        validate_example(Example("Context:\na b c\nQuestion:\na", "zz", 0, "span_qa"))
    with pytest.raises(DataError, match="must be an integer"):
        validate_example(Example("Question:\n2 + 2 =", "four", 0, "arith"))
    with pytest.raises(DataError, match="unknown task"):
        validate_example(Example("x", "1", 0, "qa9"))
    with pytest.raises(DataError, match="bad language"):
        validate_example(Example("Premise:\na\nHypothesis:\nb", "1", -1, "nli3"))
    with pytest.raises(DataError, match="empty text"):
        validate_example(Example("", "", 0, "lm"))


# --- persistence ----------------------------------------------------------------------


def test_jsonl_roundtrip(tmp_path, family):
    examples = gen_task("span_qa", 8, family, seed=12)[1]
    path = tmp_path / "data.jsonl"
    assert save_jsonl(path, examples) == 8
    assert load_jsonl(path) == examples


def test_jsonl_blank_lines_are_skipped(tmp_path, family):
    examples = gen_task("arith", 2, family, seed=0)[0]
    path = tmp_path / "data.jsonl"
    save_jsonl(path, examples)
    path.write_text(path.read_text() + "\n\n")
    assert load_jsonl(path) == examples


def test_jsonl_errors_carry_line_numbers(tmp_path, family):
    good = gen_task("nli3", 1, family, seed=0)[0][0]
    path = tmp_path / "data.jsonl"
    save_jsonl(path, [good])
    with open(path, "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(DataError, match="line 2: not valid JSON"):
        load_jsonl(path)

    path2 = tmp_path / "missing.jsonl"
    path2.write_text('{"prompt": "x", "response": "1", "task": "nli3"}\n')
    with pytest.raises(DataError, match="line 1: missing field language"):
        load_jsonl(path2)

    path3 = tmp_path / "invalid.jsonl"
    save_jsonl(path3, [good])
    with open(path3, "a") as fh:
        fh.write('{"prompt": "Premise:\\na\\nHypothesis:\\nb", "response": "9", '
                 '"language": 0, "task": "nli3"}\n')
    with pytest.raises(DataError, match="line 2: nli3 response"):
        load_jsonl(path3)

    path4 = tmp_path / "array.jsonl"
    path4.write_text("[1, 2]\n")
    with pytest.raises(DataError, match="expected an object"):
        load_jsonl(path4)


# --- pretraining corpus -----------------------------------------------------------------


def test_pretrain_corpus_shape_and_mix(family):
    corpus = build_pretrain_corpus(family, 90, seed=0)
    assert len(corpus) == 90
    assert all(ex.task == "lm" and ex.prompt == "" for ex in corpus)
    assert {ex.language for ex in corpus} == {0, 1, 2}
    scaffolded = [ex for ex in corpus if templates.RESPONSE_MARKER in ex.response]
    plain = [ex for ex in corpus
             if "\n>> " in ex.response and templates.RESPONSE_MARKER not in ex.response]
    patterned = [ex for ex in corpus
                 if templates.RESPONSE_MARKER not in ex.response and "\n>> " not in ex.response]
    assert scaffolded and plain and patterned
    # the instruction scaffold never carries a trustworthy answer; the plain
    # stream does, so format and competence stay unbound until adaptation
    for ex in patterned:
        words = ex.response.split()
        assert len(set(words)) < len(words)


def test_pretrain_corpus_determinism(family):
    a = build_pretrain_corpus(family, 20, seed=3)
    b = build_pretrain_corpus(family, 20, seed=3)
    c = build_pretrain_corpus(family, 20, seed=4)
    assert a == b
    assert a != c
    with pytest.raises(ConfigError):
        build_pretrain_corpus(family, 0)
