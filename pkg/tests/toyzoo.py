"""Deterministic zoo of small random classifiers shared across test modules.

Each case is a fully reproducible (model, tokens, rule_config) triple small
enough for exhaustive cross-checking of the two attribution paths.
"""

import numpy as np

from mambalrp import model as md
from mambalrp.rules import RuleConfig
from mambalrp.seeding import spawn_rng


def toy_case(index: int):
    """Case ``index`` of the zoo: a small model, one input, and a rule config.

    Case 0 is the fully scalar chain (one channel, one state, three tokens);
    the rest draw every knob at random but stay within quick-to-check bounds.
    Gamma is left off so both attribution paths target the same decomposition.
    """
    rng = spawn_rng(2024, "toy-zoo", str(index))
    if index == 0:
        cfg = md.ModelConfig(vocab_size=5, num_blocks=1, hidden_dim=1,
                             expand_dim=1, state_dim=1, conv_kernel=2,
                             num_classes=2, use_bias=False, use_d_skip=False)
    else:
        hidden = int(rng.integers(2, 5))
        cfg = md.ModelConfig(
            vocab_size=int(rng.integers(5, 12)),
            num_blocks=int(rng.integers(1, 3)),
            hidden_dim=hidden,
            expand_dim=int(rng.integers(hidden, 5)),
            state_dim=int(rng.integers(1, 5)),
            conv_kernel=int(rng.integers(2, 5)),
            num_classes=int(rng.integers(2, 5)),
            use_bias=bool(index % 3 == 1),
            use_d_skip=bool(index % 2 == 0),
        )
    model = md.init_params(cfg, rng)
    for name, arr in model.params.items():
        if name.endswith(".b"):  # fresh biases are zero; make them count
            model.params[name] = rng.normal(scale=0.1, size=arr.shape)
    length = 3 if index == 0 else int(rng.integers(2, 9))
    tokens = rng.integers(0, cfg.vocab_size, size=length)
    rc = RuleConfig(silu_detach=True, ssm_detach=True,
                    gate_mode="half" if index % 2 == 0 else "detach-zb",
                    rmsnorm_detach=True, gamma={}, epsilon=1e-9)
    return model, tokens, rc


def mid_model(seed: int = 0, **overrides):
    """A mid-sized random classifier for conservation-style statistics."""
    base = dict(vocab_size=24, num_blocks=2, hidden_dim=8, expand_dim=16,
                state_dim=4, conv_kernel=4, num_classes=4, use_bias=False,
                use_d_skip=True)
    base.update(overrides)
    cfg = md.ModelConfig(**base)
    return md.init_params(cfg, spawn_rng(seed, "mid-model"))


def random_tokens(cfg: md.ModelConfig, length: int, rng: np.random.Generator):
    return rng.integers(0, cfg.vocab_size, size=length)
