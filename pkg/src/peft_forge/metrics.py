"""Text-comparison metrics for generated answers.

All metrics take (prediction, reference) strings and return a float in
[0, 1]; dataset-level numbers are plain means over examples. Normalization
lowercases, strips punctuation and collapses whitespace. It deliberately does
not drop articles: the synthetic vocabulary has none, and silently deleting
single-letter tokens would corrupt span overlap scores.
"""

from __future__ import annotations

import re
import string
from collections import Counter

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")
_LABEL_RE = re.compile(r"[\"'(\[]*(-?\d+)[\"'.,:;)\]!?]*")


def normalize(text: str) -> str:
    """Lowercase, remove punctuation, collapse runs of whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def exact_match(prediction: str, reference: str) -> float:
    return float(normalize(prediction) == normalize(reference))


def token_f1(prediction: str, reference: str) -> float:
    """Multiset F1 over normalized whitespace tokens.

    Both empty counts as a perfect match; exactly one empty scores zero.
    """
    pred = normalize(prediction).split()
    gold = normalize(reference).split()
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    common = Counter(pred) & Counter(gold)
    n_common = sum(common.values())
    if n_common == 0:
        return 0.0
    precision = n_common / len(pred)
    recall = n_common / len(gold)
    return 2 * precision * recall / (precision + recall)


def parse_label(text: str, n_labels: int) -> int | None:
    """First whitespace-delimited piece read as a label in 1..n_labels.

    Returns None when the piece is not such an integer; callers score None
    as wrong rather than raising, since it is model output.
    """
    pieces = text.split()
    if not pieces:
        return None
    # unwrap quotes and trailing periods but keep a sign: "-1" is not label 1
    m = _LABEL_RE.fullmatch(pieces[0])
    if m is None:
        return None
    value = int(m.group(1))
    return value if 1 <= value <= n_labels else None


def accuracy(prediction: str, reference: str, n_labels: int) -> float:
    gold = int(reference)
    return float(parse_label(prediction, n_labels) == gold)


def extract_number(text: str) -> str | None:
    """Last integer or decimal literal in the text, or None."""
    matches = _NUMBER_RE.findall(text)
    return matches[-1] if matches else None


def maj_at_1(prediction: str, reference: str) -> float:
    """Single-sample answer accuracy: last number in the prediction against
    the reference value, compared numerically."""
    got = extract_number(prediction)
    want = extract_number(reference)
    if got is None or want is None:
        return 0.0
    return float(float(got) == float(want))
