"""Relevance attribution for the state-space classifier.

Two interchangeable computation paths produce the attributions:

* the detached-gradient path (:func:`attribute_mambalrp`) runs the forward
  pass with the stop-gradients selected by a :class:`RuleConfig` and reads
  relevance off the embedding gradient, and
* the explicit path (:func:`attribute_explicit`) walks the traced forward
  values top-down, applying closed-form propagation rules layer by layer
  (:func:`gamma_linear`, :func:`explicit_ssm_rule`, :func:`explicit_gate_rule`).

With every rule off the first path reduces to plain Gradient x Input; with the
conserving rule set on, both paths decompose the selected logit into per-token
scores whose sum matches the logit on bias-free models.
:func:`verify_proposition_residuals` cross-checks the closed-form
non-conservation residuals that motivate each rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as md
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .rules import RuleConfig
from .seeding import spawn_rng

__all__ = [
    "AttributionMap",
    "attribute_explicit",
    "attribute_mambalrp",
    "explicit_gate_rule",
    "explicit_ssm_rule",
    "gamma_linear",
    "verify_proposition_residuals",
]


# ---------------------------------------------------------------------------
# attribution record
# ---------------------------------------------------------------------------

@dataclass
class AttributionMap:
    """Attribution of one prediction to the input tokens.

    ``feature_relevance`` holds the (length, embedding-dim) decomposition;
    ``token_relevance`` is always its signed per-token sum, so the two stay
    consistent by construction.  ``output_value`` is the explained logit.
    """

    tokens: np.ndarray
    feature_relevance: np.ndarray
    class_index: int
    output_value: float
    method: str
    rule_config: RuleConfig | None = None
    metadata: dict = field(default_factory=dict)
    token_relevance: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        self.feature_relevance = np.asarray(self.feature_relevance,
                                            dtype=np.float64)
        if self.feature_relevance.ndim != 2 or \
                self.feature_relevance.shape[0] != self.tokens.shape[0]:
            raise ConfigError(
                f"feature relevance shape {self.feature_relevance.shape} does "
                f"not match {self.tokens.shape[0]} tokens")
        self.class_index = int(self.class_index)
        self.output_value = float(self.output_value)
        self.token_relevance = self.feature_relevance.sum(axis=1)

    def to_record(self) -> dict:
        """JSON-ready dict; floats keep their shortest round-trip form."""
        return {
            "method": self.method,
            "class_index": self.class_index,
            "output_value": self.output_value,
            "tokens": [int(t) for t in self.tokens],
            "token_relevance": [float(v) for v in self.token_relevance],
            "feature_relevance": [[float(v) for v in row]
                                  for row in self.feature_relevance],
            "rule_config": (self.rule_config.to_dict()
                            if self.rule_config is not None else None),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_record(cls, record: dict) -> "AttributionMap":
        required = {"method", "class_index", "output_value", "tokens",
                    "token_relevance", "feature_relevance"}
        missing = required - set(record)
        if missing:
            raise FormatError(f"attribution record missing {sorted(missing)}")
        rc = record.get("rule_config")
        amap = cls(tokens=np.asarray(record["tokens"]),
                   feature_relevance=np.asarray(record["feature_relevance"],
                                                dtype=np.float64),
                   class_index=record["class_index"],
                   output_value=record["output_value"],
                   method=record["method"],
                   rule_config=RuleConfig.from_dict(rc) if rc is not None else None,
                   metadata=dict(record.get("metadata", {})))
        recorded = np.asarray(record["token_relevance"], dtype=np.float64)
        if recorded.shape != amap.token_relevance.shape or \
                not np.allclose(recorded, amap.token_relevance,
                                rtol=1e-9, atol=1e-12):
            raise FormatError(
                "token relevance in record disagrees with its own "
                "feature-level decomposition")
        return amap

    def to_json(self) -> str:
        """Canonical serialization: sorted keys, no whitespace."""
        return json.dumps(self.to_record(), sort_keys=True,
                          separators=(",", ":"))


# ---------------------------------------------------------------------------
# detached-gradient path
# ---------------------------------------------------------------------------

def _check_class(cfg: md.ModelConfig, class_index: int) -> int:
    ci = int(class_index)
    if not 0 <= ci < cfg.num_classes:
        raise ConfigError(
            f"class index {ci} outside [0, {cfg.num_classes})")
    return ci


def _single_sequence(cfg: md.ModelConfig, tokens) -> np.ndarray:
    ids = md.validate_tokens(cfg, tokens)
    if ids.shape[0] != 1:
        raise ConfigError("attribution expects a single token sequence")
    return ids


def attribute_mambalrp(model: md.MambaModel, tokens, class_index: int | None = None,
                       rule_config: RuleConfig | None = None) -> AttributionMap:
    """Attribute one logit to the input tokens via the detached forward pass.

    Runs the model with the stop-gradients and redistribution rules selected
    by ``rule_config`` (default: the full conserving set), takes the gradient
    of the chosen logit (default: the predicted class), and returns
    gradient-times-embedding relevance pooled per token.  With every rule off
    this is exactly plain Gradient x Input and is labelled ``"gi"``.
    """
    rc = RuleConfig.default() if rule_config is None else rule_config
    cfg = model.config
    ids = _single_sequence(cfg, tokens)

    tape = ad.Tape()
    trace: dict = {}
    logits = md.forward_logits(model, tape, tokens=ids, rule_config=rc,
                               trace=trace)
    ci = (int(np.argmax(logits.data[0])) if class_index is None
          else _check_class(cfg, class_index))
    seed = np.zeros(logits.shape)
    seed[0, ci] = 1.0
    grads = ad.backward(logits, seed=seed)
    emb = trace["embeddings"]
    feature = (grads.of(emb) * emb.data)[0]
    return AttributionMap(tokens=ids[0], feature_relevance=feature,
                          class_index=ci,
                          output_value=logits.data[0, ci],
                          method="gi" if rc.is_noop else "mambalrp",
                          rule_config=rc)


# ---------------------------------------------------------------------------
# explicit propagation rules
# ---------------------------------------------------------------------------

def gamma_linear(x, weights, bias, relevance_out, gamma: float,
                 epsilon: float = 1e-9) -> np.ndarray:
    """Relevance through an affine map by the generalized gamma rule.

    Each output's relevance is shared among inputs in proportion to their
    contribution, with same-sign weight parts amplified by (1 + gamma) when
    the output pre-activation is positive (opposite-sign parts when it is
    negative); denominators are the correspondingly modified pre-activations,
    stabilized by a sign-matched ``epsilon``.  ``gamma=0`` is the plain
    proportional (Gradient x Input) decomposition.  Bias contributions are
    absorbed, not redistributed.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    r = np.asarray(relevance_out, dtype=np.float64)
    if gamma is None:
        gamma = 0.0
    if not np.isfinite(gamma) or gamma < 0:
        raise ConfigError("gamma must be finite and >= 0")
    if epsilon < 0 or not np.isfinite(epsilon):
        raise ConfigError("epsilon must be finite and >= 0")
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"gamma_linear: shapes {x.shape} and {w.shape} "
                         "do not align")
    kin, kout = w.shape
    if r.shape != x.shape[:-1] + (kout,):
        raise ShapeError(f"gamma_linear: relevance shape {r.shape} does not "
                         f"match output shape {x.shape[:-1] + (kout,)}")
    b = None if bias is None else np.asarray(bias, dtype=np.float64)
    if b is not None and b.shape != (kout,):
        raise ShapeError(f"gamma_linear: bias shape {b.shape} != ({kout},)")

    x2 = x.reshape(-1, kin)
    r2 = r.reshape(-1, kout)
    z = x2 @ w
    if b is not None:
        z = z + b
    w_hi = w + gamma * np.maximum(w, 0.0)
    w_lo = w + gamma * np.minimum(w, 0.0)
    xp = np.maximum(x2, 0.0)
    xn = np.minimum(x2, 0.0)
    d_pos = xp @ w_hi + xn @ w_lo
    d_neg = xp @ w_lo + xn @ w_hi
    if b is not None:
        d_pos = d_pos + (b + gamma * np.maximum(b, 0.0))
        d_neg = d_neg + (b + gamma * np.minimum(b, 0.0))
    zpos = z > 0
    denom = ad._stabilize(np.where(zpos, d_pos, d_neg), epsilon)
    if not np.all(denom != 0.0):
        raise NumericError("gamma_linear: zero denominator after stabilization")
    s = r2 / denom
    sp = np.where(zpos, s, 0.0)
    sn = s - sp
    coef = np.where(x2 > 0,
                    sp @ w_hi.T + sn @ w_lo.T,
                    sp @ w_lo.T + sn @ w_hi.T)
    return (x2 * coef).reshape(x.shape)


def _gamma_conv(x, w, bias, relevance_out, gamma: float,
                epsilon: float) -> np.ndarray:
    """Gamma rule through the depthwise causal convolution, one sequence.

    ``x`` and ``relevance_out`` are (length, channels); ``w`` is
    (channels, kernel) with the last tap on the current position.  The zero
    left-padding contributes nothing, so its relevance share vanishes.
    """
    length, ch = x.shape
    k = w.shape[1]
    xpad = np.zeros((length + k - 1, ch))
    xpad[k - 1:] = x
    z = np.zeros((length, ch))
    for j in range(k):
        z += xpad[j:j + length] * w[:, j]
    if bias is not None:
        z = z + bias
    w_hi = w + gamma * np.maximum(w, 0.0)
    w_lo = w + gamma * np.minimum(w, 0.0)
    xpp = np.maximum(xpad, 0.0)
    xpn = np.minimum(xpad, 0.0)
    d_pos = np.zeros((length, ch))
    d_neg = np.zeros((length, ch))
    for j in range(k):
        d_pos += xpp[j:j + length] * w_hi[:, j] + xpn[j:j + length] * w_lo[:, j]
        d_neg += xpp[j:j + length] * w_lo[:, j] + xpn[j:j + length] * w_hi[:, j]
    if bias is not None:
        d_pos = d_pos + (bias + gamma * np.maximum(bias, 0.0))
        d_neg = d_neg + (bias + gamma * np.minimum(bias, 0.0))
    zpos = z > 0
    denom = ad._stabilize(np.where(zpos, d_pos, d_neg), epsilon)
    if not np.all(denom != 0.0):
        raise NumericError("conv gamma rule: zero denominator after stabilization")
    s = relevance_out / denom
    sp = np.where(zpos, s, 0.0)
    sn = s - sp
    cpos = np.zeros_like(xpad)
    cneg = np.zeros_like(xpad)
    for j in range(k):
        cpos[j:j + length] += sp * w_hi[:, j] + sn * w_lo[:, j]
        cneg[j:j + length] += sp * w_lo[:, j] + sn * w_hi[:, j]
    coef = np.where(xpad > 0, cpos, cneg)[k - 1:]
    return x * coef


def explicit_gate_rule(relevance_out, mode: str = "half"):
    """Split gate-output relevance between the signal and gate branches.

    ``"half"`` gives each branch exactly half of every entry (their sum
    reproduces the input bit for bit); ``"detach-zb"`` routes everything to
    the signal branch.  The raw-product mode has no conserving split.
    """
    r = np.asarray(relevance_out, dtype=np.float64)
    if mode == "half":
        half = 0.5 * r
        return half, half.copy()
    if mode == "detach-zb":
        return r.copy(), np.zeros_like(r)
    raise ConfigError(
        f"gate mode '{mode}' does not conserve relevance; "
        "use 'half' or 'detach-zb'")


def explicit_ssm_rule(h_prev, x_t, a, b, c, r_h_t, r_y_prev,
                      epsilon: float = 1e-9):
    """One backward step of relevance through the scan recurrence.

    Given the previous state ``h_prev``, current input ``x_t``, decay ``a``,
    drive ``b`` (all per state over the trailing axis), the readout
    coefficients ``c`` that produced the previous output, and the relevance
    of the current state ``r_h_t`` and of the previous readout ``r_y_prev``,
    returns ``(relevance of h_prev, relevance of x_t)``.  Shares are
    proportional to each term's contribution to the node it feeds, with
    sign-matched ``epsilon`` stabilizing the denominators; the totals in and
    out agree up to the stabilizer.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    r_h_t = np.asarray(r_h_t, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    r_y_prev = np.asarray(r_y_prev, dtype=np.float64)

    h_t = a * h_prev + b * x_t[..., None]
    trans_denom = ad._stabilize(h_t, epsilon)
    readout_denom = ad._stabilize((h_prev * c).sum(axis=-1), epsilon)
    r_h_prev = (h_prev * c / readout_denom[..., None] * r_y_prev[..., None]
                + h_prev * a / trans_denom * r_h_t)
    r_x_t = (x_t[..., None] * b / trans_denom * r_h_t).sum(axis=-1)
    return r_h_prev, r_x_t


def _scan_relevance(a_bar, b_bar, c, x, y, d_skip, r_y,
                    epsilon: float) -> np.ndarray:
    """Relevance through the full recurrence for one sequence.

    Applies the per-step readout/transition/drive shares of
    :func:`explicit_ssm_rule` at every position, walking time in reverse;
    the optional input skip takes its proportional share of each readout.
    Arrays are (length, channels, states) for the scan coefficients,
    (length, states) for the readout, and (length, channels) for the rest.
    """
    length, ch, st = a_bar.shape
    h = ad.scan_states(a_bar[None], b_bar[None], x[None])[0]
    r_x = np.zeros_like(x)
    r_next = np.zeros((ch, st))
    for t in range(length - 1, -1, -1):
        out_share = r_y[t] / ad._stabilize(y[t], epsilon)
        r_h = h[t] * c[t][None, :] * out_share[:, None] + r_next
        if d_skip is not None:
            r_x[t] += d_skip * x[t] * out_share
        scale = r_h / ad._stabilize(h[t], epsilon)
        r_x[t] += (x[t][:, None] * b_bar[t] * scale).sum(axis=1)
        h_prev = h[t - 1] if t > 0 else np.zeros((ch, st))
        r_next = h_prev * a_bar[t] * scale
    return r_x


def attribute_explicit(model: md.MambaModel, tokens,
                       class_index: int | None = None,
                       rule_config: RuleConfig | None = None) -> AttributionMap:
    """Attribute one logit by explicit layer-by-layer relevance propagation.

    Computes the same decomposition as :func:`attribute_mambalrp` for the
    conserving rule set, but without any gradient machinery: the traced
    forward values are walked top-down through closed-form rules.  Requires
    the activation, scan, and normalization rules on and a conserving gate
    mode.  Bias shares are absorbed and reported in the metadata under
    ``bias_relevance_absorbed``.
    """
    rc = RuleConfig.default() if rule_config is None else rule_config
    if not (rc.silu_detach and rc.ssm_detach and rc.rmsnorm_detach):
        raise ConfigError(
            "explicit propagation implements the conserving rule set; "
            "the activation, scan, and normalization rules must all be on")
    if rc.gate_mode == "off":
        raise ConfigError(
            "explicit propagation requires a conserving gate mode "
            "('half' or 'detach-zb')")
    cfg = model.config
    ids = _single_sequence(cfg, tokens)
    length = ids.shape[1]
    eps = rc.epsilon

    tape = ad.Tape()
    trace: dict = {}
    logits = md.forward_logits(model, tape, tokens=ids, trace=trace)
    lvals = logits.data[0]
    ci = (int(np.argmax(lvals)) if class_index is None
          else _check_class(cfg, class_index))

    params = model.params
    absorbed = 0.0

    def through_linear(x_val, name, r_out, kind):
        nonlocal absorbed
        b = params.get(name + ".b")
        gamma = rc.gamma_for(kind) if kind is not None else None
        r_in = gamma_linear(x_val, params[name + ".w"], b, r_out,
                            gamma or 0.0, eps)
        if b is not None:
            absorbed += float(r_out.sum() - r_in.sum())
        return r_in

    r_logits = np.zeros(cfg.num_classes)
    r_logits[ci] = lvals[ci]
    last = trace["last_hidden"].data[0]
    r_last = through_linear(last, "head", r_logits, None)

    # normalization layers pass relevance through unchanged (the detached
    # denominator makes them diagonal-linear), so the stream relevance below
    # lives directly on each block's residual input
    r_x = np.zeros((length, cfg.hidden_dim))
    r_x[length - 1] = r_last

    for i in range(cfg.num_blocks - 1, -1, -1):
        bt = trace["blocks"][i]
        x_in = bt["x_in"].data[0]
        block_out = bt["block_out"].data[0]
        stream = ad._stabilize(x_in + block_out, eps)
        r_delta = block_out / stream * r_x
        r_x = x_in / stream * r_x

        gated = bt["gated"].data[0]
        r_gated = through_linear(gated, f"block{i}.out_proj", r_delta,
                                 "out_proj")
        r_y_scan, r_gate_pre = explicit_gate_rule(r_gated, rc.gate_mode)

        r_xprime = _scan_relevance(
            bt["a_bar"].data[0], bt["b_bar"].data[0], bt["c_mat"].data[0],
            bt["xprime"].data[0], bt["y_scan"].data[0],
            params.get(f"block{i}.d_skip"), r_y_scan, eps)

        conv_in = bt["conv_in"].data[0]
        conv_bias = params.get(f"block{i}.conv.b")
        r_before = float(r_xprime.sum())
        r_conv_in = _gamma_conv(conv_in, params[f"block{i}.conv.w"],
                                conv_bias, r_xprime,
                                rc.gamma_for("conv") or 0.0, eps)
        if conv_bias is not None:
            absorbed += r_before - float(r_conv_in.sum())

        r_inproj = np.concatenate([r_conv_in, r_gate_pre], axis=1)
        r_x = r_x + through_linear(bt["normed"].data[0], f"block{i}.in_proj",
                                   r_inproj, "in_proj")

    return AttributionMap(tokens=ids[0], feature_relevance=r_x,
                          class_index=ci, output_value=lvals[ci],
                          method="mambalrp-explicit", rule_config=rc,
                          metadata={"bias_relevance_absorbed": absorbed})


# ---------------------------------------------------------------------------
# closed-form non-conservation residuals
# ---------------------------------------------------------------------------

def verify_proposition_residuals(kind: str, x, seed: int = 0):
    """Measured vs analytic conservation residual of one standalone layer.

    Builds the named toy layer (``"silu"``, ``"gate"``, or ``"ssm-step"``)
    on plain gradients, computes the relevance lost between its inputs and
    outputs by autodiff, and evaluates the matching closed-form residual.
    Returns ``(measured, analytic)``; the two agree to rounding, and both
    vanish exactly where the layer is locally conserving.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = ad.Tape()

    if kind == "silu":
        if x.ndim != 1:
            raise ConfigError("silu residual expects a 1-D input")
        xs = tape.tensor(x)
        sig = ad.sigmoid(xs)
        y = xs * sig
        grads = ad.backward(ad.reduce_sum(y))
        g_y = grads.of(y)
        measured = float((grads.of(xs) * x).sum() - (g_y * y.data).sum())
        sd = sig.data
        analytic = float((g_y * sd * (1.0 - sd) * x ** 2).sum())
        return measured, analytic

    if kind == "gate":
        if x.ndim != 2 or x.shape[0] != 2:
            raise ConfigError("gate residual expects a (2, n) input pair")
        za = tape.tensor(x[0])
        zb = tape.tensor(x[1])
        y = za * zb
        grads = ad.backward(ad.reduce_sum(y))
        g_y = grads.of(y)
        r_in = (grads.of(za) * x[0] + grads.of(zb) * x[1]).sum()
        measured = float(r_in - (g_y * y.data).sum())
        analytic = float((g_y * y.data).sum())
        return measured, analytic

    if kind == "ssm-step":
        if x.shape != (2,):
            raise ConfigError(
                "ssm-step residual expects [input, previous state]")
        rng = spawn_rng(seed, "proposition", "ssm-step")
        p, q, r_c, u, v = rng.uniform(0.5, 1.5, size=5)
        xt = tape.tensor(x[0])
        hp = tape.tensor(x[1])
        decay = ad.sigmoid(p * xt)       # input-dependent decay
        drive = q * xt                   # input-dependent drive
        h_t = decay * hp + drive * xt
        y_prev = (r_c * hp) * hp         # state-dependent readout coefficient
        grads = ad.backward(u * h_t + v * y_prev)
        r_in = grads.of(xt) * x[0] + grads.of(hp) * x[1]
        r_out = grads.of(h_t) * h_t.data + grads.of(y_prev) * y_prev.data
        measured = float(r_in - r_out)
        sig = 1.0 / (1.0 + np.exp(-p * x[0]))
        analytic = float(u * p * sig * (1.0 - sig) * x[1] * x[0]
                         + u * q * x[0] ** 2 + v * r_c * x[1] ** 2)
        return measured, analytic

    raise ConfigError(f"unknown toy layer kind '{kind}'")
