"""Reference attribution methods: Gradient x Input, SmoothGrad, Integrated
Gradients, and a model-independent random control.

All functions emit the same :class:`~mambalrp.lrp.AttributionMap` record as
the rule-based attributor, so downstream evaluation is method-agnostic.
SmoothGrad and Integrated Gradients evaluate their sample batches in a single
batched forward/backward pass and reduce in a fixed order, so results are
deterministic given the spec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as md
from .errors import ConfigError
from .lrp import AttributionMap, _check_class, _single_sequence, attribute_mambalrp
from .rules import RuleConfig
from .seeding import spawn_rng

__all__ = [
    "BaselineSpec",
    "gradient_x_input",
    "integrated_gradients",
    "random_attribution",
    "run_baseline",
    "smoothgrad",
]

METHODS = ("gi", "smoothgrad", "ig", "random")


@dataclass(frozen=True)
class BaselineSpec:
    """Configuration shared by the baseline attribution methods.

    ``noise_std`` is interpreted as a fraction of the input's embedding value
    range (max minus min over the embedded sequence); the integration baseline
    of the gradient-path method is the zero embedding.
    """

    method: str = "gi"
    noise_mean: float = 0.0
    noise_std: float = 0.15
    samples: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"unknown baseline method '{self.method}' (choose from {METHODS})")
        if self.samples < 1:
            raise ConfigError("sample count must be >= 1")
        if self.noise_std < 0 or not np.isfinite(self.noise_std):
            raise ConfigError("noise std must be finite and >= 0")


def _clean_logits(model: md.MambaModel, ids: np.ndarray) -> np.ndarray:
    return md.classify(model, ids[0])


def _batched_gradients(model: md.MambaModel, embeddings: np.ndarray,
                       class_index: int) -> np.ndarray:
    """Per-sample plain gradients of the selected logit, shape like input."""
    tape = ad.Tape()
    emb = tape.tensor(embeddings)
    logits = md.forward_logits(model, tape, embeddings=emb)
    seed = np.zeros(logits.shape)
    seed[:, class_index] = 1.0
    return ad.backward(logits, seed=seed).of(emb)


def gradient_x_input(model: md.MambaModel, tokens,
                     class_index: int | None = None) -> AttributionMap:
    """Plain Gradient x Input: the rule-based attributor with every rule off."""
    return attribute_mambalrp(model, tokens, class_index,
                              rule_config=RuleConfig.none())


def smoothgrad(model: md.MambaModel, tokens, class_index: int | None = None,
               spec: BaselineSpec | None = None) -> AttributionMap:
    """Mean Gradient x Input over Gaussian-perturbed embeddings.

    Noise is drawn once from the spec's seed with standard deviation
    ``noise_std`` times the embedding value range of the input; each of the
    ``samples`` noisy embeddings contributes its own gradient-times-input map
    and the maps are averaged.  Zero noise collapses every sample to the same
    input, i.e. exactly plain Gradient x Input.
    """
    spec = BaselineSpec(method="smoothgrad") if spec is None else spec
    cfg = model.config
    ids = _single_sequence(cfg, tokens)
    clean = _clean_logits(model, ids)
    ci = (int(np.argmax(clean)) if class_index is None
          else _check_class(cfg, class_index))

    emb0 = model.params["embed"][ids[0]]
    scale = spec.noise_std * float(emb0.max() - emb0.min())
    meta = {"samples": spec.samples, "noise_mean": spec.noise_mean,
            "noise_std": spec.noise_std, "noise_scale": scale,
            "seed": spec.seed}
    if scale == 0.0 and spec.noise_mean == 0.0:
        # every sample sees the unperturbed input, so the average is a single
        # gradient evaluation
        base = gradient_x_input(model, ids[0], ci)
        feature = base.feature_relevance
    else:
        rng = spawn_rng(spec.seed, "smoothgrad")
        noise = rng.normal(loc=spec.noise_mean, scale=scale,
                           size=(spec.samples,) + emb0.shape)
        noisy = emb0[None] + noise
        grads = _batched_gradients(model, noisy, ci)
        feature = (grads * noisy).sum(axis=0) / spec.samples
    return AttributionMap(tokens=ids[0], feature_relevance=feature,
                          class_index=ci, output_value=clean[ci],
                          method="smoothgrad", metadata=meta)


def integrated_gradients(model: md.MambaModel, tokens,
                         class_index: int | None = None,
                         spec: BaselineSpec | None = None) -> AttributionMap:
    """Path integral of gradients from the zero embedding to the input.

    Uses the midpoint rule with ``samples`` steps: gradients are taken at
    ``alpha = (k + 0.5) / samples`` along the straight path and their average
    is multiplied by the input embedding (the path endpoint difference).

    Note on completeness: the input normalization layer rescales small
    activations sharply, so along the zero-baseline path most of the logit
    change can concentrate in a thin region near the baseline; the sum of
    scores then approaches ``f(x) - f(0)`` only as the step count resolves
    that region.
    """
    spec = BaselineSpec(method="ig") if spec is None else spec
    cfg = model.config
    ids = _single_sequence(cfg, tokens)
    clean = _clean_logits(model, ids)
    ci = (int(np.argmax(clean)) if class_index is None
          else _check_class(cfg, class_index))

    emb0 = model.params["embed"][ids[0]]
    alphas = (np.arange(spec.samples) + 0.5) / spec.samples
    path = alphas[:, None, None] * emb0[None]
    grads = _batched_gradients(model, path, ci)
    feature = grads.sum(axis=0) / spec.samples * emb0
    return AttributionMap(tokens=ids[0], feature_relevance=feature,
                          class_index=ci, output_value=clean[ci],
                          method="ig", metadata={"samples": spec.samples})


def random_attribution(tokens, seed: int = 0) -> AttributionMap:
    """Seeded standard-normal scores per token, independent of any model."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    rng = spawn_rng(seed, "random-attribution")
    feature = rng.standard_normal(size=(tokens.shape[0], 1))
    return AttributionMap(tokens=tokens, feature_relevance=feature,
                          class_index=-1, output_value=0.0, method="random",
                          metadata={"seed": seed})


def run_baseline(model: md.MambaModel, tokens, spec: BaselineSpec,
                 class_index: int | None = None) -> AttributionMap:
    """Dispatch to the baseline named by ``spec.method``."""
    if spec.method == "gi":
        return gradient_x_input(model, tokens, class_index)
    if spec.method == "smoothgrad":
        return smoothgrad(model, tokens, class_index, spec)
    if spec.method == "ig":
        return integrated_gradients(model, tokens, class_index, spec)
    return random_attribution(tokens, spec.seed)
