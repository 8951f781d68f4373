"""Tests for the baseline attribution methods."""

import numpy as np
import pytest

from mambalrp import autodiff as ad
from mambalrp import model as md
from mambalrp.baselines import (BaselineSpec, gradient_x_input,
                                integrated_gradients, random_attribution,
                                run_baseline, smoothgrad)
from mambalrp.errors import ConfigError
from mambalrp.lrp import attribute_mambalrp
from mambalrp.rules import RuleConfig
from mambalrp.seeding import spawn_rng

from toyzoo import mid_model, random_tokens


def one_block_model(seed=21):
    return mid_model(seed=seed, num_blocks=1)


def test_baseline_spec_validation():
    with pytest.raises(ConfigError):
        BaselineSpec(method="attention-rollout")
    with pytest.raises(ConfigError):
        BaselineSpec(samples=0)
    with pytest.raises(ConfigError):
        BaselineSpec(noise_std=-0.1)


def test_gradient_x_input_is_all_rules_off_byte_identical():
    model = mid_model(seed=22)
    tokens = random_tokens(model.config, 8, spawn_rng(22, "gi"))
    a = gradient_x_input(model, tokens, class_index=1)
    b = attribute_mambalrp(model, tokens, class_index=1,
                           rule_config=RuleConfig.none())
    assert a.to_json() == b.to_json()
    assert a.method == "gi"


def test_gradient_x_input_directional_finite_difference():
    model = one_block_model()
    tokens = random_tokens(model.config, 6, spawn_rng(23, "gi-fd"))
    ci = 2
    amap = gradient_x_input(model, tokens, class_index=ci)
    emb = model.params["embed"][tokens]
    rng = spawn_rng(23, "gi-fd-direction")
    u = rng.normal(size=emb.shape)

    def f(scale):
        tape = ad.Tape()
        logits = md.forward_logits(model, tape,
                                   embeddings=emb * (1.0 + scale * u))
        return float(logits.data[0, ci])

    # directional derivative along u*emb equals sum(u * relevance) because
    # relevance is gradient times embedding
    step = 1e-5
    fd = (f(step) - f(-step)) / (2 * step)
    analytic = float((u * amap.feature_relevance).sum())
    assert abs(fd - analytic) <= 1e-5 * max(1.0, abs(fd))


def test_smoothgrad_zero_noise_equals_gi_exactly():
    model = mid_model(seed=24)
    tokens = random_tokens(model.config, 7, spawn_rng(24, "sg-zero"))
    sg = smoothgrad(model, tokens, spec=BaselineSpec(method="smoothgrad",
                                                     noise_std=0.0, samples=7))
    gi = gradient_x_input(model, tokens)
    assert np.array_equal(sg.feature_relevance, gi.feature_relevance)
    assert sg.method == "smoothgrad"


def test_smoothgrad_deterministic_and_seed_sensitive():
    model = mid_model(seed=25)
    tokens = random_tokens(model.config, 7, spawn_rng(25, "sg-det"))
    spec = BaselineSpec(method="smoothgrad", samples=5, seed=3)
    first = smoothgrad(model, tokens, spec=spec)
    second = smoothgrad(model, tokens, spec=spec)
    assert first.to_json() == second.to_json()
    other = smoothgrad(model, tokens,
                       spec=BaselineSpec(method="smoothgrad", samples=5, seed=4))
    assert not np.array_equal(first.feature_relevance, other.feature_relevance)


def test_smoothgrad_small_noise_stays_near_gi():
    model = mid_model(seed=26)
    tokens = random_tokens(model.config, 8, spawn_rng(26, "sg-near"))
    gi = gradient_x_input(model, tokens)
    sg = smoothgrad(model, tokens,
                    spec=BaselineSpec(method="smoothgrad", noise_std=0.01,
                                      samples=64, seed=0))
    scale = np.max(np.abs(gi.feature_relevance)) + 1e-12
    assert np.max(np.abs(sg.feature_relevance - gi.feature_relevance)) < 0.2 * scale


def test_integrated_gradients_completeness():
    # Completeness needs the quadrature to resolve the integrand.  With
    # ordinary-scale embeddings the input normalization renormalizes almost
    # immediately along the zero-baseline path, concentrating the whole logit
    # change in a boundary layer near alpha=0 that coarse step grids miss; at
    # small embedding scale the normalizer's epsilon dominates, the integrand
    # is smooth, and the midpoint rule converges as expected.
    model = one_block_model(seed=27)
    model.params["embed"] = model.params["embed"] * 1e-3
    tokens = random_tokens(model.config, 8, spawn_rng(27, "ig-complete"))
    ig = integrated_gradients(model, tokens,
                              spec=BaselineSpec(method="ig", samples=300))
    ci = ig.class_index
    f_x = md.classify(model, tokens)[ci]
    tape = ad.Tape()
    D = model.config.hidden_dim
    zero = md.forward_logits(model, tape,
                             embeddings=np.zeros((1, len(tokens), D)))
    f_0 = zero.data[0, ci]
    target = f_x - f_0
    assert abs(ig.token_relevance.sum() - target) <= 0.01 * max(1.0, abs(target))


def test_integrated_gradients_deterministic():
    model = mid_model(seed=28)
    tokens = random_tokens(model.config, 6, spawn_rng(28, "ig-det"))
    spec = BaselineSpec(method="ig", samples=16)
    assert integrated_gradients(model, tokens, spec=spec).to_json() == \
        integrated_gradients(model, tokens, spec=spec).to_json()


def test_random_attribution_seeded_and_model_free():
    tokens = [3, 1, 4, 1, 5]
    a = random_attribution(tokens, seed=9)
    b = random_attribution(tokens, seed=9)
    c = random_attribution(tokens, seed=10)
    assert np.array_equal(a.token_relevance, b.token_relevance)
    assert not np.array_equal(a.token_relevance, c.token_relevance)
    assert a.token_relevance.shape == (5,)
    assert a.class_index == -1 and a.output_value == 0.0


def test_run_baseline_dispatch():
    model = mid_model(seed=29)
    tokens = random_tokens(model.config, 6, spawn_rng(29, "dispatch"))
    for method in ("gi", "smoothgrad", "ig", "random"):
        amap = run_baseline(model, tokens,
                            BaselineSpec(method=method, samples=3, seed=1))
        assert amap.method == method
        assert amap.token_relevance.shape == (6,)
