"""Faithfulness and conservation evaluation of attribution maps.

Perturbation curves remove (flip) or restore (insert) tokens in relevance
order — most relevant first (``morf``) or least relevant first (``lerf``) —
and track the predicted-class logit.  The area differences between orderings
summarize faithfulness: a method that ranks truly decisive tokens first makes
the flip curve drop faster and the insert curve rise faster.

All steps of one curve are evaluated in a single batched forward pass, which
keeps the endpoint identities bitwise exact across curves (rows of equal-shape
batches are deterministic); a separately computed single-sequence logit can
differ in the last bit because the underlying BLAS picks a different kernel
for single-row products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as md
from .errors import ConfigError
from .lrp import AttributionMap

__all__ = [
    "ConservationReport",
    "FaithfulnessScore",
    "PerturbationCurve",
    "conservation_scatter",
    "delta_scores",
    "faithfulness_scores",
    "perturbation_curve",
    "ranked_positions",
    "relevance_position_histogram",
    "xra",
    "xra_accuracy",
]

MODES = ("flip", "insert")
ORDERS = ("morf", "lerf")
REPLACEMENTS = ("zero", "padding")


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def ranked_positions(relevance, order: str) -> np.ndarray:
    """Token positions sorted for the given perturbation order.

    ``morf`` ranks by signed relevance descending, ``lerf`` ascending; ties
    are always broken by ascending position, so the two orders are exact
    reverses whenever all scores are distinct.
    """
    r = np.asarray(relevance, dtype=np.float64)
    if r.ndim != 1:
        raise ConfigError(f"relevance must be 1-D, got shape {r.shape}")
    if order not in ORDERS:
        raise ConfigError(f"order must be one of {ORDERS}, got '{order}'")
    key = -r if order == "morf" else r
    return np.lexsort((np.arange(r.shape[0]), key))


def _token_scores(attribution, length: int) -> np.ndarray:
    if isinstance(attribution, AttributionMap):
        scores = attribution.token_relevance
    else:
        scores = np.asarray(attribution, dtype=np.float64)
    if scores.shape != (length,):
        raise ConfigError(
            f"attribution covers {scores.shape} tokens, sequence has {length}")
    return scores


# ---------------------------------------------------------------------------
# perturbation curves
# ---------------------------------------------------------------------------

@dataclass
class PerturbationCurve:
    """Logit trajectory as tokens are progressively perturbed."""

    mode: str
    order: str
    fractions: np.ndarray
    logits: np.ndarray
    class_index: int
    auc: float = field(init=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}, got '{self.order}'")
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        f = self.fractions
        if f.ndim != 1 or f.shape[0] < 2 or f[0] != 0.0 or f[-1] != 1.0 \
                or np.any(np.diff(f) <= 0):
            raise ConfigError(
                "fractions must increase strictly from 0 to 1")
        if self.logits.shape != f.shape:
            raise ConfigError(
                f"logit list length {self.logits.shape} does not match "
                f"{f.shape[0]} fractions")
        self.auc = float(np.trapezoid(self.logits, self.fractions))


def perturbation_curve(model: md.MambaModel, tokens, attribution, mode: str,
                       order: str, steps: int = 11,
                       class_index: int | None = None,
                       replacement: str = "zero") -> PerturbationCurve:
    """Flip or insert tokens in relevance order and record the tracked logit.

    At fraction ``f`` the ``round(f * length)`` highest-ranked positions are
    perturbed (flip) or restored (insert); perturbed positions carry the zero
    embedding, or the padding token's embedding with ``replacement="padding"``.
    The tracked class defaults to the model's prediction on the clean input.
    All ``steps`` variants run in one batched forward pass.
    """
    if steps < 2:
        raise ConfigError("steps must be >= 2")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got '{mode}'")
    if replacement not in REPLACEMENTS:
        raise ConfigError(
            f"replacement must be one of {REPLACEMENTS}, got '{replacement}'")
    cfg = model.config
    ids = md.validate_tokens(cfg, tokens)
    if ids.shape[0] != 1:
        raise ConfigError("perturbation expects a single token sequence")
    length = ids.shape[1]
    scores = _token_scores(attribution, length)
    ranking = ranked_positions(scores, order)

    emb0 = model.params["embed"][ids[0]]
    if replacement == "zero":
        filler = np.zeros(cfg.hidden_dim)
    else:
        filler = model.params["embed"][md.PAD_TOKEN]

    fractions = np.linspace(0.0, 1.0, steps)
    batch = np.empty((steps, length, cfg.hidden_dim))
    for s, frac in enumerate(fractions):
        k = int(np.floor(frac * length + 0.5))
        if mode == "flip":
            row = emb0.copy()
            row[ranking[:k]] = filler
        else:
            row = np.tile(filler, (length, 1))
            row[ranking[:k]] = emb0[ranking[:k]]
        batch[s] = row

    tape = ad.Tape()
    logits = md.forward_logits(model, tape, embeddings=batch).data
    if class_index is None:
        clean_row = 0 if mode == "flip" else steps - 1
        ci = int(np.argmax(logits[clean_row]))
    else:
        if not 0 <= int(class_index) < cfg.num_classes:
            raise ConfigError(
                f"class index {class_index} outside [0, {cfg.num_classes})")
        ci = int(class_index)
    return PerturbationCurve(mode=mode, order=order, fractions=fractions,
                             logits=logits[:, ci], class_index=ci)


# ---------------------------------------------------------------------------
# faithfulness scores
# ---------------------------------------------------------------------------

@dataclass
class FaithfulnessScore:
    """Area differences between the two orderings, for both protocols.

    ``delta_flip`` is the LeRF-minus-MoRF flip area, ``delta_insert`` the
    MoRF-minus-LeRF insert area; higher is better for both.
    """

    delta_flip: float
    delta_insert: float
    auc_flip_morf: float
    auc_flip_lerf: float
    auc_insert_morf: float
    auc_insert_lerf: float


def delta_scores(flip_morf: PerturbationCurve, flip_lerf: PerturbationCurve,
                 insert_morf: PerturbationCurve,
                 insert_lerf: PerturbationCurve) -> FaithfulnessScore:
    """Combine the four curves of one example into its faithfulness score."""
    expected = (("flip", "morf"), ("flip", "lerf"),
                ("insert", "morf"), ("insert", "lerf"))
    curves = (flip_morf, flip_lerf, insert_morf, insert_lerf)
    for curve, (mode, order) in zip(curves, expected):
        if (curve.mode, curve.order) != (mode, order):
            raise ConfigError(
                f"expected a {mode}/{order} curve, got {curve.mode}/{curve.order}")
        if not np.array_equal(curve.fractions, flip_morf.fractions):
            raise ConfigError("curves were computed on different step grids")
    return FaithfulnessScore(
        delta_flip=flip_lerf.auc - flip_morf.auc,
        delta_insert=insert_morf.auc - insert_lerf.auc,
        auc_flip_morf=flip_morf.auc,
        auc_flip_lerf=flip_lerf.auc,
        auc_insert_morf=insert_morf.auc,
        auc_insert_lerf=insert_lerf.auc)


def faithfulness_scores(model: md.MambaModel, tokens, attribution,
                        steps: int = 11, class_index: int | None = None,
                        replacement: str = "zero") -> FaithfulnessScore:
    """All four perturbation curves of one example, reduced to its score."""
    curves = [perturbation_curve(model, tokens, attribution, mode, order,
                                 steps, class_index, replacement)
              for mode in MODES for order in ORDERS]
    return delta_scores(*curves)


# ---------------------------------------------------------------------------
# conservation
# ---------------------------------------------------------------------------

@dataclass
class ConservationReport:
    """Per-example output value vs relevance sum, plus aggregates."""

    output_values: np.ndarray
    relevance_sums: np.ndarray
    gaps: np.ndarray = field(init=False)
    mean_gap: float = field(init=False)
    max_gap: float = field(init=False)
    identity_correlation: float = field(init=False)

    def __post_init__(self):
        self.output_values = np.asarray(self.output_values, dtype=np.float64)
        self.relevance_sums = np.asarray(self.relevance_sums, dtype=np.float64)
        if self.output_values.shape != self.relevance_sums.shape \
                or self.output_values.ndim != 1:
            raise ConfigError("output values and relevance sums must be "
                              "1-D arrays of equal length")
        self.gaps = np.abs(self.output_values - self.relevance_sums)
        self.mean_gap = float(self.gaps.mean())
        self.max_gap = float(self.gaps.max())
        if self.output_values.std() == 0.0 or self.relevance_sums.std() == 0.0:
            self.identity_correlation = 0.0
        else:
            self.identity_correlation = float(
                np.corrcoef(self.relevance_sums, self.output_values)[0, 1])


def conservation_scatter(model: md.MambaModel, dataset: Iterable,
                        attributor: Callable) -> ConservationReport:
    """Attribute every example and pair each relevance sum with its logit.

    ``dataset`` yields token sequences (or objects with a ``tokens``
    attribute); ``attributor(model, tokens)`` must return an
    :class:`AttributionMap`.
    """
    outputs = []
    sums = []
    for example in dataset:
        tokens = getattr(example, "tokens", example)
        amap = attributor(model, tokens)
        outputs.append(amap.output_value)
        sums.append(float(amap.token_relevance.sum()))
    if not outputs:
        raise ConfigError("conservation report needs at least one example")
    return ConservationReport(output_values=np.array(outputs),
                              relevance_sums=np.array(sums))


# ---------------------------------------------------------------------------
# retrieval accuracy and positional statistics
# ---------------------------------------------------------------------------

def xra(attribution, span: Sequence[int], k: int = 2) -> int:
    """1 if any of the top-``k`` relevant positions falls inside ``span``.

    Positions rank by signed relevance descending with ascending-position
    tie-break, matching the most-relevant-first perturbation order.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if isinstance(attribution, AttributionMap):
        scores = attribution.token_relevance
    else:
        scores = np.asarray(attribution, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] == 0:
        raise ConfigError("empty attribution has no top positions")
    top = ranked_positions(scores, "morf")[:k]
    targets = set(int(p) for p in span)
    return int(any(int(p) in targets for p in top))


def xra_accuracy(attributions: Iterable, spans: Iterable[Sequence[int]],
                 k: int = 2) -> float:
    """Mean retrieval hit rate over a dataset."""
    hits = [xra(a, s, k) for a, s in zip(attributions, spans)]
    if not hits:
        raise ConfigError("retrieval accuracy needs at least one example")
    return float(np.mean(hits))


def relevance_position_histogram(attributions: Iterable,
                                 generated_positions: Iterable[int],
                                 top_k: int = 10) -> np.ndarray:
    """Counts of backward distances from each prediction to its most
    relevant context positions.

    For every attribution, the ``top_k`` highest-ranked positions each
    contribute one count at distance ``generated position - token position``.
    Returns the dense count array indexed by distance (position 0 = the
    prediction's own slot).
    """
    if top_k < 1:
        raise ConfigError("top_k must be >= 1")
    distances: list[int] = []
    for amap, gpos in zip(attributions, generated_positions):
        scores = (amap.token_relevance if isinstance(amap, AttributionMap)
                  else np.asarray(amap, dtype=np.float64))
        if scores.ndim != 1 or scores.shape[0] == 0:
            raise ConfigError("empty attribution has no top positions")
        top = ranked_positions(scores, "morf")[:top_k]
        for pos in top:
            d = int(gpos) - int(pos)
            if d < 0:
                raise ConfigError(
                    f"relevant position {int(pos)} lies after the generated "
                    f"position {int(gpos)}")
            distances.append(d)
    if not distances:
        raise ConfigError("position histogram needs at least one example")
    return np.bincount(np.asarray(distances))
