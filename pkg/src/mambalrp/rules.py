"""Attribution rule configuration.

``RuleConfig`` selects which relevance-propagation corrections are applied
when attributing a prediction.  Every correction leaves the forward pass
bit-for-bit unchanged; they only alter what the backward sweep computes:

* ``silu_detach``    -- treat the logistic factor of each SiLU as a constant,
  so the activation behaves linearly for relevance purposes.
* ``ssm_detach``     -- treat the input-dependent scan coefficients (decay,
  drive, and readout matrices) as constants, keeping relevance on the signal
  path of the recurrence.
* ``gate_mode``      -- how the multiplicative gate splits relevance:
  ``"half"`` gives each factor half, ``"detach-zb"`` routes everything through
  the signal branch and none through the gate, ``"off"`` leaves the raw
  product (which double-counts).
* ``rmsnorm_detach`` -- treat the RMS denominator as a constant.
* ``gamma``          -- optional gamma-redistribution per layer kind
  (``in_proj``, ``out_proj``, ``conv``); absent kinds use plain gradient flow.
* ``epsilon``        -- sign-matched stabilizer for relevance denominators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError

GATE_MODES = ("half", "detach-zb", "off")
GAMMA_KINDS = ("in_proj", "out_proj", "conv")


@dataclass(frozen=True)
class RuleConfig:
    silu_detach: bool = True
    ssm_detach: bool = True
    gate_mode: str = "half"
    rmsnorm_detach: bool = True
    gamma: Mapping[str, float] = field(default_factory=lambda: {"conv": 0.25})
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(
                f"gate_mode must be one of {GATE_MODES}, got '{self.gate_mode}'")
        for kind, value in dict(self.gamma).items():
            if kind not in GAMMA_KINDS:
                raise ConfigError(
                    f"gamma is not supported on layer kind '{kind}' "
                    f"(supported: {GAMMA_KINDS})")
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"gamma for '{kind}' must be finite and >= 0")
        if not np.isfinite(self.epsilon) or self.epsilon <= 0:
            raise ConfigError("epsilon must be a positive finite number")

    @classmethod
    def default(cls) -> "RuleConfig":
        """Full rule set: all detaches on, half gate, gamma on conv layers."""
        return cls()

    @classmethod
    def none(cls) -> "RuleConfig":
        """Everything off: backward is then the plain gradient."""
        return cls(silu_detach=False, ssm_detach=False, gate_mode="off",
                   rmsnorm_detach=False, gamma={})

    @property
    def is_noop(self) -> bool:
        return (not self.silu_detach and not self.ssm_detach
                and self.gate_mode == "off" and not self.rmsnorm_detach
                and not self.gamma)

    def gamma_for(self, kind: str) -> float | None:
        return dict(self.gamma).get(kind)

    def replace(self, **changes) -> "RuleConfig":
        from dataclasses import replace as _replace
        return _replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "silu_detach": self.silu_detach,
            "ssm_detach": self.ssm_detach,
            "gate_mode": self.gate_mode,
            "rmsnorm_detach": self.rmsnorm_detach,
            "gamma": {k: float(v) for k, v in sorted(dict(self.gamma).items())},
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RuleConfig":
        allowed = {"silu_detach", "ssm_detach", "gate_mode", "rmsnorm_detach",
                   "gamma", "epsilon"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown rule config fields: {sorted(extra)}")
        return cls(**dict(d))
