"""Straight-line reference forward pass, used as an oracle in tests.

Implemented with explicit Python loops and no shared code with the package's
forward pass, so agreement between the two is meaningful.
"""

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _silu(x):
    return x * _sigmoid(x)


def _rmsnorm(x, scale):
    out = np.empty_like(x)
    for l in range(x.shape[0]):
        out[l] = x[l] * scale / np.sqrt(np.mean(x[l] ** 2) + 1e-6)
    return out


def _block(cfg, params, i, x):
    def p(name):
        return params[f"block{i}.{name}"]

    def pb(name):
        return params.get(f"block{i}.{name}")

    length = x.shape[0]
    e_dim, n_dim, k = cfg.expand_dim, cfg.state_dim, cfg.conv_kernel

    xz = x @ p("in_proj.w")
    if pb("in_proj.b") is not None:
        xz = xz + pb("in_proj.b")
    x_path, gate_pre = xz[:, :e_dim], xz[:, e_dim:]

    conv = np.zeros((length, e_dim))
    for l in range(length):
        for e in range(e_dim):
            acc = pb("conv.b")[e] if pb("conv.b") is not None else 0.0
            for j in range(k):
                src = l - (k - 1) + j
                if src >= 0:
                    acc += p("conv.w")[e, j] * x_path[src, e]
            conv[l, e] = acc

    xprime = _silu(conv)
    gate = _silu(gate_pre)

    b_mat = xprime @ p("b_proj.w")
    c_mat = xprime @ p("c_proj.w")
    if pb("b_proj.b") is not None:
        b_mat = b_mat + pb("b_proj.b")
        c_mat = c_mat + pb("c_proj.b")
    delta = _softplus(xprime @ p("delta_proj.w") + p("delta_bias"))
    a = -np.exp(p("a_raw"))

    y = np.zeros((length, e_dim))
    for e in range(e_dim):
        h = np.zeros(n_dim)
        for l in range(length):
            a_bar = np.exp(delta[l, e] * a[e])
            b_bar = delta[l, e] * b_mat[l]
            h = a_bar * h + b_bar * xprime[l, e]
            y[l, e] = c_mat[l] @ h
            if cfg.use_d_skip:
                y[l, e] += p("d_skip")[e] * xprime[l, e]

    out = (y * gate) @ p("out_proj.w")
    if pb("out_proj.b") is not None:
        out = out + pb("out_proj.b")
    return out


def reference_logits(model, tokens):
    """Class logits for a single sequence of token ids."""
    cfg, params = model.config, model.params
    x = params["embed"][np.asarray(tokens)]
    for i in range(cfg.num_blocks):
        x = x + _block(cfg, params, i, _rmsnorm(x, params[f"block{i}.rms.scale"]))
    x = _rmsnorm(x, params["final_rms.scale"])
    logits = x[-1] @ params["head.w"]
    if "head.b" in params:
        logits = logits + params["head.b"]
    return logits
