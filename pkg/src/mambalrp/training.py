"""A minimal Adam trainer for sequence classifiers.

Deterministic end to end: the validation split, every epoch's batch order,
and all parameter updates derive from the training seed, so two runs with the
same inputs produce bitwise-identical parameters.  Batches group examples of
equal length, which keeps padding out of the pipeline entirely.

``train`` updates ``model.params`` in place and returns the loss/accuracy
history; non-finite losses abort immediately with :class:`TrainingError`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as md
from .errors import ConfigError, TrainingError
from .seeding import spawn_rng
from .tasks import Example

__all__ = ["TrainConfig", "TrainResult", "evaluate_accuracy", "train"]

_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            # zero is allowed: it turns training into a pure evaluation pass
            raise ConfigError(
                f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(
                f"val_fraction must lie in (0, 1), got {self.val_fraction}")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class TrainResult:
    """Per-epoch history plus which epoch's parameters were kept."""

    history: dict[str, list[float]]
    best_epoch: int
    epochs_run: int
    stopped_early: bool


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _length_grouped_batches(examples: Sequence[Example], order: np.ndarray,
                            batch_size: int) -> list[np.ndarray]:
    """Chunk ``order`` into batches of equal-length sequences.

    Groups keep the permuted order within each length, so shuffling still
    reaches every batch composition over epochs.
    """
    buckets: dict[int, list[int]] = {}
    for idx in order:
        buckets.setdefault(len(examples[idx].tokens), []).append(int(idx))
    batches = []
    for length in sorted(buckets):
        block = buckets[length]
        for start in range(0, len(block), batch_size):
            batches.append(np.array(block[start:start + batch_size]))
    return batches


def _stack_batch(examples: Sequence[Example],
                 indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.stack([examples[i].tokens for i in indices])
    labels = np.array([examples[i].label for i in indices])
    return tokens, labels


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _cross_entropy(tape: ad.Tape, logits: ad.Tensor,
                   labels: np.ndarray) -> ad.Tensor:
    """Mean negative log-likelihood, max-shifted for overflow safety.

    The per-row maximum enters as a constant: it cancels exactly in the
    softmax, so treating it as gradient-free changes nothing.
    """
    bsz, num_classes = logits.shape
    shift = tape.tensor(logits.data.max(axis=1, keepdims=True))
    exps = ad.exp(ad.sub(logits, shift))
    lse = ad.add(ad.log(ad.reduce_sum(exps, axis=1, keepdims=True)), shift)
    onehot = np.zeros((bsz, num_classes))
    onehot[np.arange(bsz), labels] = 1.0
    picked = ad.reduce_sum(ad.mul(logits, tape.tensor(onehot)),
                           axis=1, keepdims=True)
    total = ad.reduce_sum(ad.sub(lse, picked))
    return ad.mul(total, tape.tensor(1.0 / bsz))


def _batch_loss(model: md.MambaModel, tokens: np.ndarray, labels: np.ndarray,
                with_grads: bool):
    tape = ad.Tape()
    pt = {name: tape.tensor(arr) for name, arr in model.params.items()}
    logits = md.forward_logits(model, tape, tokens=tokens, param_tensors=pt)
    loss = _cross_entropy(tape, logits, labels)
    if not with_grads:
        return float(loss.data), None, logits.data
    grads = ad.backward(loss)
    return (float(loss.data),
            {name: grads.of(pt[name]) for name in pt},
            logits.data)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.config = config
        self.step = 0
        self.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        self.second_moment = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        scale = 1.0 if norm <= cfg.grad_clip else cfg.grad_clip / norm
        self.step += 1
        bias1 = 1.0 - cfg.beta1 ** self.step
        bias2 = 1.0 - cfg.beta2 ** self.step
        for name, grad in grads.items():
            g = grad * scale
            m = self.first_moment[name]
            v = self.second_moment[name]
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            params[name] -= (cfg.learning_rate * (m / bias1)
                             / (np.sqrt(v / bias2) + _ADAM_EPS))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(model: md.MambaModel, examples: Sequence[Example],
          config: TrainConfig | None = None) -> TrainResult:
    """Fit ``model`` on ``examples``; early-stops on validation loss.

    The parameters kept at the end are those of the best validation epoch.
    """
    cfg = config or TrainConfig()
    n = len(examples)
    if n < 2:
        raise ConfigError("training needs at least two examples")
    for ex in examples:
        if not 0 <= ex.label < model.config.num_classes:
            raise ConfigError(
                f"label {ex.label} outside the model's "
                f"{model.config.num_classes} classes")

    split_rng = spawn_rng(cfg.seed, "train", "split")
    perm = split_rng.permutation(n)
    val_count = min(n - 1, max(1, round(cfg.val_fraction * n)))
    val_idx, train_idx = perm[:val_count], perm[val_count:]

    optimizer = _Adam(model.params, cfg)
    history: dict[str, list[float]] = {
        "train_loss": [], "val_loss": [], "val_accuracy": []}
    best_loss = np.inf
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {}
    stopped_early = False
    epochs_run = 0

    for epoch in range(cfg.max_epochs):
        epochs_run = epoch + 1
        epoch_rng = spawn_rng(cfg.seed, "train", f"epoch{epoch}")
        order = train_idx[epoch_rng.permutation(train_idx.shape[0])]
        seen = 0
        loss_sum = 0.0
        for batch in _length_grouped_batches(examples, order, cfg.batch_size):
            tokens, labels = _stack_batch(examples, batch)
            loss, grads, _ = _batch_loss(model, tokens, labels, with_grads=True)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}")
            optimizer.update(model.params, grads)
            loss_sum += loss * batch.shape[0]
            seen += batch.shape[0]
        history["train_loss"].append(loss_sum / seen)

        val_seen = 0
        val_sum = 0.0
        val_hits = 0
        for batch in _length_grouped_batches(examples, val_idx,
                                             cfg.batch_size):
            tokens, labels = _stack_batch(examples, batch)
            loss, _, logits = _batch_loss(model, tokens, labels,
                                          with_grads=False)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite validation loss at epoch {epoch}")
            val_sum += loss * batch.shape[0]
            val_hits += int((np.argmax(logits, axis=1) == labels).sum())
            val_seen += batch.shape[0]
        val_loss = val_sum / val_seen
        history["val_loss"].append(val_loss)
        history["val_accuracy"].append(val_hits / val_seen)

        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        elif epoch - best_epoch >= cfg.patience:
            stopped_early = True
            break

    model.params.update(best_params)
    return TrainResult(history=history, best_epoch=best_epoch,
                       epochs_run=epochs_run, stopped_early=stopped_early)


def evaluate_accuracy(model: md.MambaModel, examples: Sequence[Example],
                      batch_size: int = 64) -> float:
    """Fraction of examples whose predicted class matches the label."""
    if not examples:
        raise ConfigError("accuracy needs at least one example")
    hits = 0
    order = np.arange(len(examples))
    for batch in _length_grouped_batches(examples, order, batch_size):
        tokens, labels = _stack_batch(examples, batch)
        tape = ad.Tape()
        logits = md.forward_logits(model, tape, tokens=tokens).data
        hits += int((np.argmax(logits, axis=1) == labels).sum())
    return hits / len(examples)
