"""Training loop, optimizers, schedules, and the response loss mask.

One step processes one batch: per-example forward/backward accumulates
gradients on the trainable tensors (adapter state, or the whole base model in
full fine-tune mode), then AdamW or SGD applies a decoupled weight-decay
update. Everything is driven by one seeded generator, so a (seed, data,
config) triple reproduces the run bit for bit. Base weights are only ever
touched in full fine-tune mode; adapters train with the base byte-frozen.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .model import BaseWeights, forward
from .tensor import Graph, Tensor, cross_entropy, mul, narrow

OPTIMIZERS = ("adamw", "sgd")
SCHEDULES = ("constant", "cosine")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 2
    weight_decay: float = 0.02
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adamw"
    lr_schedule: str = "constant"
    warmup_ratio: float = 0.1
    grad_clip: float | None = None
    full_finetune: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ConfigError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")

    def as_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "lr_schedule": self.lr_schedule,
            "warmup_ratio": self.warmup_ratio,
            "grad_clip": self.grad_clip,
            "full_finetune": self.full_finetune,
        }


# Full-tuning control baseline: every base weight trains, annealed schedule.
FULL_FT_DEFAULTS = dict(learning_rate=1e-5, epochs=2, lr_schedule="cosine",
                        warmup_ratio=0.1, batch_size=8, full_finetune=True)


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    grad_norm: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_mean_loss: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,loss,lr,grad_norm\n")
            for rec in self.steps:
                fh.write(f"{rec.step},{rec.loss:.10g},{rec.lr:.10g},{rec.grad_norm:.10g}\n")

    def summary(self) -> dict:
        return {
            "n_steps": len(self.steps),
            "final_loss": self.steps[-1].loss if self.steps else None,
            "epoch_mean_loss": self.epoch_mean_loss,
            "wall_seconds": round(self.wall_seconds, 3),
        }


def loss_mask(tokens: np.ndarray, delimiter: Sequence[int],
              source: str = "example") -> np.ndarray:
    """Boolean mask over `tokens` marking positions strictly after the delimiter.

    The delimiter is the tokenized response scaffold; supervision covers only
    what the model is expected to produce. Missing delimiter or an empty tail
    is a data error naming the offending example.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    delim = list(int(t) for t in delimiter)
    if not delim:
        raise DataError(f"{source}: empty response delimiter")
    n, k = len(tokens), len(delim)
    end = -1
    for start in range(n - k, -1, -1):
        if list(tokens[start:start + k]) == delim:
            end = start + k
            break
    if end < 0:
        raise DataError(f"{source}: response delimiter not found")
    if end >= n:
        raise DataError(f"{source}: empty response after delimiter")
    mask = np.zeros(n, dtype=bool)
    mask[end:] = True
    return mask


def _schedule_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for 1-indexed `step` of `total_steps`."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    warmup = math.ceil(cfg.warmup_ratio * total_steps)
    if step <= warmup:
        return cfg.learning_rate * step / max(warmup, 1)
    progress = (step - warmup) / max(total_steps - warmup, 1)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class _AdamW:
    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = ADAM_BETA1, ADAM_BETA2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
            if self.cfg.weight_decay:
                update = update + self.cfg.weight_decay * p.data
            p.data -= lr * update


class _SGD:
    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg

    def step(self, lr: float) -> None:
        for _, p in self.params:
            g = p.grad
            if g is None:
                continue
            update = g
            if self.cfg.weight_decay:
                update = update + self.cfg.weight_decay * p.data
            p.data -= lr * update


def train(weights: BaseWeights, attachment, trainables: list[tuple[str, Tensor]],
          data: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig) -> TrainLog:
    """Optimize `trainables` on (tokens, mask) pairs; returns the step log.

    `attachment` supplies the adapter's forward hooks (None trains nothing
    unless full_finetune set the base trainable). Each example contributes the
    mean cross-entropy over its masked positions; a batch averages examples.
    A non-finite loss stops the run with a numeric error.
    """
    if not data:
        raise DataError("training data is empty")
    if not trainables:
        raise ConfigError("nothing to train: no trainable tensors were provided")

    kwargs = attachment.forward_kwargs() if attachment is not None else {}
    n_pre = attachment.n_prepended if attachment is not None else 0
    optimizer = (_AdamW if cfg.optimizer == "adamw" else _SGD)(trainables, cfg)

    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)

    log = TrainLog()
    started = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            step += 1
            lr = _schedule_lr(cfg, step, total_steps)
            for _, p in trainables:
                p.zero_grad()
            batch_loss = 0.0
            inv = 1.0 / len(batch)
            for i in batch:
                tokens, mask = data[i]
                value, loss = example_loss(weights, kwargs, n_pre, tokens, mask)
                batch_loss += value
                loss.backward()
            batch_loss *= inv
            if not math.isfinite(batch_loss):
                raise NumericError(f"training diverged: loss {batch_loss} at step {step}")
            _scale_grads(trainables, inv)
            grad_norm = _global_norm(trainables)
            if cfg.grad_clip is not None and grad_norm > cfg.grad_clip:
                _scale_grads(trainables, cfg.grad_clip / grad_norm)
            optimizer.step(lr)
            epoch_losses.append(batch_loss)
            log.steps.append(StepRecord(step=step, loss=batch_loss, lr=lr, grad_norm=grad_norm))
        log.epoch_mean_loss.append(float(np.mean(epoch_losses)))
    log.wall_seconds = time.perf_counter() - started
    return log


def example_loss(weights, kwargs, n_pre, tokens, mask):
    """(float loss, scalar Tensor) for one supervised example."""
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if len(tokens) < 2:
        raise DataError("training example shorter than two tokens")
    with Graph():
        logits = forward(weights, tokens[:-1], **kwargs)
        if n_pre:
            logits = narrow(logits, 0, n_pre, len(tokens) - 1)
        loss = cross_entropy(logits, tokens[1:], mask[1:])
    return float(loss.data), loss


def _global_norm(trainables) -> float:
    total = 0.0
    for _, p in trainables:
        if p.grad is not None:
            g = p.grad
            total += float((g * g).sum())
    return math.sqrt(total)


def _scale_grads(trainables, factor: float) -> None:
    for _, p in trainables:
        if p.grad is not None:
            p.grad *= factor
