"""Decoding controls: temperature scaling and nucleus truncation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class DecodeConfig:
    """How to turn logits into tokens.

    temperature 0 means exact argmax (the seed is then irrelevant). top_p keeps
    the smallest descending-probability prefix whose mass reaches top_p and
    renormalizes over it.
    """

    temperature: float = 0.0
    top_p: float = 1.0
    max_new_tokens: int = 16
    eos_id: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if not (0.0 < self.top_p <= 1.0):
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")

    def as_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_new_tokens": self.max_new_tokens,
            "eos_id": self.eos_id,
            "seed": self.seed,
        }


def nucleus_support(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Indices of the smallest descending-probability prefix with mass >= top_p."""
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, top_p, side="left")) + 1
    k = min(k, len(order))
    return order[:k]


def sample_token(logits: np.ndarray, temperature: float, top_p: float,
                 rng: np.random.Generator | None) -> int:
    """Draw one token id from a single row of logits."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if temperature == 0.0:
        return int(np.argmax(logits))
    if rng is None:
        raise ConfigError("sampling with temperature > 0 requires a random generator")
    z = logits / temperature
    z = z - z.max()
    probs = np.exp(z)
    probs = probs / probs.sum()
    if top_p < 1.0:
        keep = nucleus_support(probs, top_p)
        sub = probs[keep]
        sub = sub / sub.sum()
        return int(keep[rng.choice(len(keep), p=sub)])
    return int(rng.choice(len(probs), p=probs))
