"""Synthetic sequence-classification tasks with known decisive tokens.

Each generated example records the ``span`` of positions that determine its
label, which gives evaluation code ground truth to score attributions
against:

* ``keyword-sentiment`` -- filler tokens plus one to three planted keywords;
  each class owns two keyword ids and the label is the planted class.
* ``passkey-needle``    -- a fixed background motif with one contiguous run
  of a class-specific passkey id hidden at a random position.
* ``copy-previous``     -- uniform random tokens; the label is the token one
  step before the end, so the model must copy from position L-2.

Generation is deterministic per ``(seed, kind, example index)``, so datasets
can be regenerated instead of shipped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError
from .model import PAD_TOKEN
from .seeding import spawn_rng

__all__ = [
    "Example",
    "TaskSpec",
    "KINDS",
    "background_motif",
    "default_spec",
    "generate",
    "keyword_ids",
    "keyword_label",
    "load_jsonl",
    "save_jsonl",
]

KINDS = ("keyword-sentiment", "passkey-needle", "copy-previous")

_MOTIF_PERIOD = 7  # background pattern length for the needle task


@dataclass(frozen=True)
class TaskSpec:
    """Settings that fully determine a synthetic dataset."""

    kind: str
    vocab_size: int
    min_length: int
    max_length: int
    num_classes: int
    needle_width: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got '{self.kind}'")
        if self.num_classes < 2:
            raise ConfigError("tasks need at least two classes")
        if not 2 <= self.min_length <= self.max_length:
            raise ConfigError(
                f"need 2 <= min_length <= max_length, got "
                f"[{self.min_length}, {self.max_length}]")
        if self.kind == "keyword-sentiment":
            # padding + two keyword ids per class + at least one filler id
            if self.vocab_size < 2 * self.num_classes + 2:
                raise ConfigError(
                    f"keyword task with {self.num_classes} classes needs a "
                    f"vocabulary of at least {2 * self.num_classes + 2} ids, "
                    f"got {self.vocab_size}")
        elif self.kind == "passkey-needle":
            # padding + one passkey id per class + at least one motif id
            if self.vocab_size < self.num_classes + 2:
                raise ConfigError(
                    f"needle task with {self.num_classes} classes needs a "
                    f"vocabulary of at least {self.num_classes + 2} ids, "
                    f"got {self.vocab_size}")
            if not 1 <= self.needle_width <= self.min_length:
                raise ConfigError(
                    f"needle width {self.needle_width} must fit in the "
                    f"shortest sequence length {self.min_length}")
        else:  # copy-previous: the label *is* a token id
            if self.num_classes != self.vocab_size:
                raise ConfigError(
                    "the copy task predicts a token id, so num_classes must "
                    f"equal vocab_size (got {self.num_classes} vs "
                    f"{self.vocab_size})")

    def replace(self, **changes) -> "TaskSpec":
        return replace(self, **changes)


@dataclass
class Example:
    """One labelled sequence plus the positions that decide the label."""

    tokens: np.ndarray
    label: int
    span: tuple[int, ...]

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.label = int(self.label)
        self.span = tuple(int(p) for p in self.span)


def default_spec(kind: str, seed: int = 0) -> TaskSpec:
    """Reference settings for each task (fixed lengths, small vocabularies)."""
    if kind == "keyword-sentiment":
        return TaskSpec(kind=kind, vocab_size=16, min_length=16, max_length=16,
                        num_classes=2, seed=seed)
    if kind == "passkey-needle":
        return TaskSpec(kind=kind, vocab_size=16, min_length=24, max_length=24,
                        num_classes=4, needle_width=3, seed=seed)
    if kind == "copy-previous":
        return TaskSpec(kind=kind, vocab_size=12, min_length=12, max_length=12,
                        num_classes=12, seed=seed)
    raise ConfigError(f"kind must be one of {KINDS}, got '{kind}'")


# ---------------------------------------------------------------------------
# vocabulary layout helpers
# ---------------------------------------------------------------------------

def keyword_ids(spec: TaskSpec, label: int) -> tuple[int, int]:
    """The two keyword token ids owned by ``label`` in the keyword task."""
    if spec.kind != "keyword-sentiment":
        raise ConfigError("keyword ids only exist for the keyword task")
    if not 0 <= label < spec.num_classes:
        raise ConfigError(f"label {label} outside [0, {spec.num_classes})")
    return (1 + 2 * label, 2 + 2 * label)


def _filler_ids(spec: TaskSpec) -> np.ndarray:
    return np.arange(2 * spec.num_classes + 1, spec.vocab_size)


def keyword_label(spec: TaskSpec, tokens) -> int:
    """Recover the label of a keyword-task sequence from its planted keywords.

    Majority vote over keyword occurrences; ties resolve to the lowest class.
    Sequences without any keyword raise ``ConfigError``.
    """
    arr = np.asarray(tokens)
    counts = np.zeros(spec.num_classes, dtype=np.int64)
    for label in range(spec.num_classes):
        counts[label] = np.isin(arr, keyword_ids(spec, label)).sum()
    if counts.sum() == 0:
        raise ConfigError("sequence contains no keyword tokens")
    return int(np.argmax(counts))


def _passkey_id(spec: TaskSpec, label: int) -> int:
    return 1 + label


def background_motif(spec: TaskSpec, length: int) -> np.ndarray:
    """The needle task's background: one fixed motif tiled to ``length``.

    The motif is drawn once per spec seed from the non-passkey ids, so every
    example shares the same background and only the needle varies.
    """
    if spec.kind != "passkey-needle":
        raise ConfigError("background motifs only exist for the needle task")
    rng = spawn_rng(spec.seed, spec.kind, "motif")
    motif_ids = np.arange(spec.num_classes + 1, spec.vocab_size)
    motif = motif_ids[rng.integers(0, motif_ids.shape[0], size=_MOTIF_PERIOD)]
    reps = -(-length // _MOTIF_PERIOD)  # ceil division
    return np.tile(motif, reps)[:length]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _draw_length(spec: TaskSpec, rng: np.random.Generator) -> int:
    if spec.min_length == spec.max_length:
        return spec.min_length
    return int(rng.integers(spec.min_length, spec.max_length + 1))


def _keyword_example(spec: TaskSpec, rng: np.random.Generator) -> Example:
    length = _draw_length(spec, rng)
    label = int(rng.integers(spec.num_classes))
    filler = _filler_ids(spec)
    tokens = filler[rng.integers(0, filler.shape[0], size=length)]
    planted = int(rng.integers(1, min(3, length) + 1))
    positions = rng.choice(length, size=planted, replace=False)
    ids = keyword_ids(spec, label)
    for pos in positions:
        tokens[pos] = ids[int(rng.integers(2))]
    return Example(tokens=tokens, label=label, span=tuple(sorted(positions)))


def _passkey_example(spec: TaskSpec, rng: np.random.Generator) -> Example:
    length = _draw_length(spec, rng)
    label = int(rng.integers(spec.num_classes))
    tokens = background_motif(spec, length).copy()
    start = int(rng.integers(0, length - spec.needle_width + 1))
    tokens[start:start + spec.needle_width] = _passkey_id(spec, label)
    return Example(tokens=tokens, label=label,
                   span=tuple(range(start, start + spec.needle_width)))


def _copy_example(spec: TaskSpec, rng: np.random.Generator) -> Example:
    length = _draw_length(spec, rng)
    tokens = rng.integers(PAD_TOKEN + 1, spec.vocab_size, size=length)
    return Example(tokens=tokens, label=int(tokens[-2]), span=(length - 2,))


_GENERATORS = {
    "keyword-sentiment": _keyword_example,
    "passkey-needle": _passkey_example,
    "copy-previous": _copy_example,
}


def generate(spec: TaskSpec, count: int) -> list[Example]:
    """``count`` examples, reproducible per ``(seed, kind, index)``."""
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    make = _GENERATORS[spec.kind]
    return [make(spec, spawn_rng(spec.seed, spec.kind, str(index)))
            for index in range(count)]


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_jsonl(examples: Iterable[Example], path) -> None:
    """One JSON object per line: ``{"tokens": [...], "label": n, "span": [...]}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {"tokens": [int(t) for t in ex.tokens],
                      "label": int(ex.label),
                      "span": [int(p) for p in ex.span]}
            fh.write(json.dumps(record, sort_keys=True,
                                separators=(",", ":")) + "\n")


def load_jsonl(path) -> list[Example]:
    """Read a dataset written by :func:`save_jsonl`; malformed lines raise
    :class:`FormatError` with the offending line number."""
    examples: list[Example] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            missing = {"tokens", "label", "span"} - record.keys()
            if missing:
                raise FormatError(
                    f"{path}:{lineno}: missing keys {sorted(missing)}")
            tokens, label, span = record["tokens"], record["label"], record["span"]
            if (not isinstance(tokens, list) or not tokens
                    or not all(isinstance(t, int) for t in tokens)):
                raise FormatError(
                    f"{path}:{lineno}: tokens must be a non-empty list of ints")
            if not isinstance(label, int) or isinstance(label, bool):
                raise FormatError(f"{path}:{lineno}: label must be an int")
            if (not isinstance(span, list)
                    or not all(isinstance(p, int) for p in span)):
                raise FormatError(f"{path}:{lineno}: span must be a list of ints")
            examples.append(Example(tokens=np.array(tokens, dtype=np.int64),
                                    label=label, span=tuple(span)))
    return examples
