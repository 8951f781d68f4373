"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records primitive operations eagerly as they execute; ``backward``
walks the record in reverse, accumulating vector-Jacobian products.  Two
features carry the rest of the package:

* ``detach`` (stop-gradient): forward value passes through bit-for-bit, the
  backward rule is identically zero.  The attribution rules are built on it.
* ``linear`` / ``conv1d_causal`` accept an optional ``gamma``.  The forward
  pass is unchanged; the backward pass then propagates relevance with the
  generalized gamma redistribution rule instead of the plain gradient, so a
  single backward sweep can mix gradient and relevance propagation.

All tensors are float64 and C-contiguous.  In checked mode (the default) every
operation validates that its output is finite and raises ``NumericError``
otherwise.  A tape and its tensors belong to one thread; independent tapes may
be used concurrently.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


class Tensor:
    """A float64 array registered on a tape.

    Tensors are created through ``Tape.tensor`` (leaves) or by applying the
    operations in this module.  Operator sugar (``+``, ``*``, ``@``, ...) is
    provided for readability; plain numbers and numpy arrays are lifted onto
    the same tape automatically.
    """

    __slots__ = ("data", "tape", "node_id")
    __array_ufunc__ = None  # keep numpy from intercepting mixed expressions

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ConfigError(f"item: tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    """One recorded operation: inputs, output, and its local backward rule."""

    __slots__ = ("kind", "input_ids", "output_id", "vjp")

    def __init__(self, kind: str, input_ids: tuple[int, ...], output_id: int,
                 vjp: Callable[[np.ndarray], tuple]):
        self.kind = kind
        self.input_ids = input_ids
        self.output_id = output_id
        self.vjp = vjp


class Tape:
    """Ordered record of operations, topologically sorted by construction."""

    def __init__(self, checked: bool = True):
        self.checked = checked
        self.nodes: list[_Node] = []
        self._shapes: dict[int, tuple[int, ...]] = {}
        self._next_id = 0
        # Used by grad_check: a log captures detach outputs on the reference
        # run, a replay feeds them back verbatim on perturbed runs so finite
        # differences treat stopped branches as constants.
        self._detach_log: list[np.ndarray] | None = None
        self._detach_replay = None

    def tensor(self, data) -> Tensor:
        """Register a leaf tensor holding ``data`` (converted to float64)."""
        return self._wrap(data, kind="leaf")

    def __len__(self) -> int:
        return len(self.nodes)

    def _wrap(self, data, kind: str) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if self.checked and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in '{kind}' output")
        node_id = self._next_id
        self._next_id += 1
        self._shapes[node_id] = arr.shape
        return Tensor(arr, self, node_id)

    def _record(self, kind: str, inputs: Sequence[Tensor], out_data,
                vjp: Callable[[np.ndarray], tuple]) -> Tensor:
        out = self._wrap(out_data, kind)
        self.nodes.append(_Node(kind, tuple(t.node_id for t in inputs),
                                out.node_id, vjp))
        return out


class GradientMap:
    """Gradients keyed by tensor, as returned by ``backward``."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient of the backward seed with respect to ``t`` (zeros if none)."""
        if t.tape is not self._tape:
            raise ConfigError("tensor does not belong to this gradient map's tape")
        g = self._grads.get(t.node_id)
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._grads


def _lift(tape: Tape, value) -> Tensor:
    if isinstance(value, Tensor):
        if value.tape is not tape:
            raise ConfigError("operands were registered on different tapes")
        return value
    return tape.tensor(np.asarray(value, dtype=np.float64))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(a.tape, b)
    if isinstance(b, Tensor):
        return _lift(b.tape, a), b
    raise ConfigError("at least one operand must be a Tensor")


def _same_tape(tensors: Sequence[Tensor]) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ConfigError("operands were registered on different tapes")
    return tape


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return a.tape._record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return a.tape._record("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)

    return a.tape._record("mul", (a, b), ad * bd, vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    with np.errstate(all="ignore"):
        out = ad / bd

    def vjp(g):
        with np.errstate(all="ignore"):
            return (_unbroadcast(g / bd, ash),
                    _unbroadcast(-g * out / bd, bsh))

    return a.tape._record("div", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return a.tape._record("neg", (a,), -a.data, vjp)


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return a.tape._record("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(all="ignore"):
        out = np.log(ad)

    def vjp(g):
        with np.errstate(all="ignore"):
            return (g / ad,)

    return a.tape._record("log", (a,), out, vjp)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(all="ignore"):
            return (g * 0.5 / out,)

    return a.tape._record("sqrt", (a,), out, vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # overflow-safe logistic: exp is only ever applied to non-positive values
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return a.tape._record("sigmoid", (a,), out, vjp)


def softplus(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g * _sigmoid_np(ad),)

    return a.tape._record("softplus", (a,), np.logaddexp(0.0, ad), vjp)


# ---------------------------------------------------------------------------
# shape and contraction primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Contraction ``out[..., n] = sum_k a[..., k] * b[k, n]``.

    ``b`` may also be a vector ``(k,)``, giving ``out[...] = sum_k a[..., k] b[k]``.
    """
    a, b = _pair(a, b)
    if b.ndim not in (1, 2):
        raise ShapeError(f"matmul: right operand must be rank 1 or 2, got {b.shape}")
    if a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    k = b.shape[0]

    def vjp(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1])
        else:
            ga = g[..., None] * bd
            gb = ad.reshape(-1, k).T @ g.reshape(-1)
        return ga, gb

    return a.tape._record("matmul", (a, b), ad @ bd, vjp)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    ash = a.shape
    out = a.data.sum(axis=axes if axes else None, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            held = [1 if i in axes else d for i, d in enumerate(ash)]
            g = np.reshape(g, held)
        return (np.broadcast_to(g, ash).copy(),)

    return a.tape._record("sum", (a,), out, vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    ash = a.shape

    def vjp(g):
        return (g.reshape(ash),)

    return a.tape._record("reshape", (a,), a.data.reshape(shape), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    dim = a.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ShapeError(
            f"slice: range [{start}, {stop}) invalid for axis {axis} of {a.shape}")
    idx = tuple(slice(start, stop) if i == axis else slice(None)
                for i in range(a.ndim))
    ash = a.shape

    def vjp(g):
        gx = np.zeros(ash)
        gx[idx] = g
        return (gx,)

    return a.tape._record("slice", (a,), a.data[idx], vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ConfigError("concat: needs at least one tensor")
    tape = _same_tape(parts)
    axis = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim:
            raise ShapeError("concat: ranks differ")
        for i in range(p.ndim):
            if i != axis and p.shape[i] != parts[0].shape[i]:
                raise ShapeError(
                    f"concat: shapes {[q.shape for q in parts]} differ off axis {axis}")
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._record("concat", parts,
                        np.concatenate([p.data for p in parts], axis=axis), vjp)


def take_rows(m: Tensor, indices) -> Tensor:
    """Gather rows of a matrix: ``out[..., :] = m[indices[...], :]``.

    The index array is a fixed attribute (not differentiated); the backward
    rule scatter-adds into the matrix gradient.
    """
    idx = np.asarray(indices)
    if m.ndim != 2:
        raise ShapeError(f"take_rows: expected a matrix, got {m.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ConfigError("take_rows: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise ConfigError(
            f"take_rows: index out of range for {m.shape[0]} rows")
    msh = m.shape

    def vjp(g):
        gm = np.zeros(msh)
        np.add.at(gm, idx, g)
        return (gm,)

    return m.tape._record("take_rows", (m,), m.data[idx], vjp)


# ---------------------------------------------------------------------------
# stop-gradient
# ---------------------------------------------------------------------------

def detach(a: Tensor) -> Tensor:
    """Forward identity, backward zero."""
    tape = a.tape
    data = a.data
    if tape._detach_replay is not None:
        # grad_check replay: reuse the value captured on the reference run so
        # finite differences see the stopped branch as a constant.
        try:
            data = next(tape._detach_replay)
        except StopIteration:
            raise ConfigError("detach replay exhausted: function structure changed")
        if data.shape != a.shape:
            raise ConfigError("detach replay shape mismatch: function structure changed")
    if tape._detach_log is not None:
        tape._detach_log.append(data)

    def vjp(g):
        return (None,)

    return tape._record("detach", (a,), data, vjp)


# ---------------------------------------------------------------------------
# affine layers with optional gamma-rule backward
# ---------------------------------------------------------------------------

def _stabilize(denom: np.ndarray, epsilon: float) -> np.ndarray:
    """Sign-matched epsilon stabilizer; zero denominators count as positive."""
    return denom + np.where(denom >= 0, epsilon, -epsilon)


def linear(x, w, bias=None, gamma: float | None = None,
           epsilon: float = 1e-9) -> Tensor:
    """Affine map ``out = x @ w + bias`` over the trailing axis.

    With ``gamma=None`` the backward rule is the plain gradient.  With a gamma
    value the forward output is identical but the backward sweep redistributes
    relevance with the generalized gamma rule: positive/negative input parts
    are matched with gamma-amplified positive/negative weight parts depending
    on the sign of each output pre-activation, each output's share normalized
    by its modified pre-activation (sign-matched epsilon stabilized).  Weight
    and bias receive no gradient in that mode.
    """
    x, w = _pair(x, w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} and {w.shape} do not align")
    if bias is not None:
        bias = _lift(x.tape, bias)
        if bias.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({w.shape[1]},)")
    if gamma is not None and gamma < 0:
        raise ConfigError("linear: gamma must be non-negative")

    xd, wd = x.data, w.data
    kin, kout = wd.shape
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    inputs = (x, w) if bias is None else (x, w, bias)

    if gamma is None:
        def vjp(g):
            gx = g @ wd.T
            gw = xd.reshape(-1, kin).T @ g.reshape(-1, kout)
            if bias is None:
                return gx, gw
            return gx, gw, g.reshape(-1, kout).sum(axis=0)
    else:
        gval = float(gamma)
        bd = bias.data if bias is not None else None
        checked = x.tape.checked

        def vjp(g):
            x2 = xd.reshape(-1, kin)
            y2 = out.reshape(-1, kout)
            rel = (g.reshape(-1, kout)) * y2
            w_hi = wd + gval * np.maximum(wd, 0.0)
            w_lo = wd + gval * np.minimum(wd, 0.0)
            xp = np.maximum(x2, 0.0)
            xn = np.minimum(x2, 0.0)
            zpos = y2 > 0
            d_pos = xp @ w_hi + xn @ w_lo
            d_neg = xp @ w_lo + xn @ w_hi
            if bd is not None:
                d_pos = d_pos + (bd + gval * np.maximum(bd, 0.0))
                d_neg = d_neg + (bd + gval * np.minimum(bd, 0.0))
            denom = _stabilize(np.where(zpos, d_pos, d_neg), epsilon)
            if checked and not np.all(denom != 0.0):
                raise NumericError("linear: zero denominator after stabilization")
            s = rel / denom
            sp = np.where(zpos, s, 0.0)
            sn = s - sp
            coef_pos = sp @ w_hi.T + sn @ w_lo.T
            coef_neg = sp @ w_lo.T + sn @ w_hi.T
            gx = np.where(x2 > 0, coef_pos, coef_neg).reshape(xd.shape)
            if bias is None:
                return gx, None
            return gx, None, None

    return x.tape._record("linear", inputs, out, vjp)


def conv1d_causal(x, w, bias=None, gamma: float | None = None,
                  epsilon: float = 1e-9) -> Tensor:
    """Depthwise causal 1-D convolution over ``x`` of shape (B, L, E).

    The input is zero-padded on the left by (kernel - 1) so each output
    position sees only itself and earlier positions; ``w`` has shape
    (E, kernel) and slides one dot product per channel, with ``w[:, -1]``
    aligned to the current position.  ``gamma`` selects the relevance
    backward rule exactly as in ``linear``.
    """
    x, w = _pair(x, w)
    if x.ndim != 3:
        raise ShapeError(f"conv1d: expected (batch, length, channels), got {x.shape}")
    if w.ndim != 2 or w.shape[0] != x.shape[2]:
        raise ShapeError(f"conv1d: kernel shape {w.shape} does not match input {x.shape}")
    if bias is not None:
        bias = _lift(x.tape, bias)
        if bias.shape != (x.shape[2],):
            raise ShapeError(f"conv1d: bias shape {bias.shape} != ({x.shape[2]},)")
    if gamma is not None and gamma < 0:
        raise ConfigError("conv1d: gamma must be non-negative")

    bsz, length, ch = x.shape
    k = w.shape[1]
    xd, wd = x.data, w.data
    xpad = np.zeros((bsz, length + k - 1, ch))
    xpad[:, k - 1:, :] = xd
    out = np.zeros((bsz, length, ch))
    for j in range(k):
        out += xpad[:, j:j + length, :] * wd[:, j]
    if bias is not None:
        out = out + bias.data
    inputs = (x, w) if bias is None else (x, w, bias)

    if gamma is None:
        def vjp(g):
            gpad = np.zeros_like(xpad)
            gw = np.empty_like(wd)
            for j in range(k):
                gpad[:, j:j + length, :] += g * wd[:, j]
                gw[:, j] = (xpad[:, j:j + length, :] * g).sum(axis=(0, 1))
            gx = gpad[:, k - 1:, :]
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 1))
    else:
        gval = float(gamma)
        bd = bias.data if bias is not None else None
        checked = x.tape.checked

        def vjp(g):
            rel = g * out
            w_hi = wd + gval * np.maximum(wd, 0.0)
            w_lo = wd + gval * np.minimum(wd, 0.0)
            xpp = np.maximum(xpad, 0.0)
            xpn = np.minimum(xpad, 0.0)
            d_pos = np.zeros((bsz, length, ch))
            d_neg = np.zeros((bsz, length, ch))
            for j in range(k):
                d_pos += xpp[:, j:j + length, :] * w_hi[:, j] \
                    + xpn[:, j:j + length, :] * w_lo[:, j]
                d_neg += xpp[:, j:j + length, :] * w_lo[:, j] \
                    + xpn[:, j:j + length, :] * w_hi[:, j]
            if bd is not None:
                d_pos = d_pos + (bd + gval * np.maximum(bd, 0.0))
                d_neg = d_neg + (bd + gval * np.minimum(bd, 0.0))
            zpos = out > 0
            denom = _stabilize(np.where(zpos, d_pos, d_neg), epsilon)
            if checked and not np.all(denom != 0.0):
                raise NumericError("conv1d: zero denominator after stabilization")
            s = rel / denom
            sp = np.where(zpos, s, 0.0)
            sn = s - sp
            cpos = np.zeros_like(xpad)
            cneg = np.zeros_like(xpad)
            for j in range(k):
                cpos[:, j:j + length, :] += sp * w_hi[:, j] + sn * w_lo[:, j]
                cneg[:, j:j + length, :] += sp * w_lo[:, j] + sn * w_hi[:, j]
            gpad = np.where(xpad > 0, cpos, cneg)
            # relevance landing on the zero left-pad belongs to x = 0 inputs
            # and is exactly zero, so cropping loses nothing
            gx = gpad[:, k - 1:, :]
            if bias is None:
                return gx, None
            return gx, None, None

    return x.tape._record("conv1d", inputs, out, vjp)


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------

def scan_states(a_bar: np.ndarray, b_bar: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain numpy helper: hidden states of the recurrence, shape (B, L, E, N).

    ``h[t] = a_bar[t] * h[t-1] + b_bar[t] * x[t]`` with ``h`` starting at zero.
    """
    bsz, length, ch, st = a_bar.shape
    h = np.empty((bsz, length, ch, st))
    prev = np.zeros((bsz, ch, st))
    bx = b_bar * x[..., None]
    for t in range(length):
        prev = a_bar[:, t] * prev + bx[:, t]
        h[:, t] = prev
    return h


def selective_scan(a_bar, b_bar, c, x, d_skip=None) -> Tensor:
    """Input-dependent linear recurrence with per-step readout.

    Shapes: ``a_bar``/``b_bar`` (B, L, E, N), ``c`` (B, L, N), ``x`` (B, L, E),
    optional ``d_skip`` (E,).  Starting from a zero state,

        ``h[t] = a_bar[t] * h[t-1] + b_bar[t] * x[t]``
        ``y[t, e] = sum_n c[t, n] * h[t, e, n]  (+ d_skip[e] * x[t, e])``

    The whole recurrence is one recorded operation; its backward rule runs the
    adjoint recurrence in reverse, so gradients flow through every step.
    """
    tensors = [a_bar, b_bar, c, x] + ([] if d_skip is None else [d_skip])
    if not all(isinstance(t, Tensor) for t in tensors):
        raise ConfigError("selective_scan: all operands must be Tensors")
    tape = _same_tape(tensors)
    if a_bar.ndim != 4 or b_bar.shape != a_bar.shape:
        raise ShapeError(
            f"selective_scan: a_bar {a_bar.shape} / b_bar {b_bar.shape} must be equal rank-4")
    bsz, length, ch, st = a_bar.shape
    if c.shape != (bsz, length, st):
        raise ShapeError(f"selective_scan: c shape {c.shape} != {(bsz, length, st)}")
    if x.shape != (bsz, length, ch):
        raise ShapeError(f"selective_scan: x shape {x.shape} != {(bsz, length, ch)}")
    if d_skip is not None and d_skip.shape != (ch,):
        raise ShapeError(f"selective_scan: d_skip shape {d_skip.shape} != ({ch},)")

    ad, bd, cd, xd = a_bar.data, b_bar.data, c.data, x.data
    h = scan_states(ad, bd, xd)
    y = np.einsum("blen,bln->ble", h, cd)
    if d_skip is not None:
        y = y + xd * d_skip.data

    def vjp(g):
        ga = np.empty_like(ad)
        gb = np.empty_like(bd)
        gc = np.einsum("ble,blen->bln", g, h)
        gx = np.zeros_like(xd)
        if d_skip is not None:
            gx += g * d_skip.data
            gd = (g * xd).sum(axis=(0, 1))
        carry = np.zeros((bsz, ch, st))
        for t in range(length - 1, -1, -1):
            gh = g[:, t, :, None] * cd[:, t, None, :] + carry
            hp = h[:, t - 1] if t > 0 else np.zeros((bsz, ch, st))
            ga[:, t] = gh * hp
            gb[:, t] = gh * xd[:, t, :, None]
            gx[:, t] += (gh * bd[:, t]).sum(axis=-1)
            carry = gh * ad[:, t]
        if d_skip is None:
            return ga, gb, gc, gx
        return ga, gb, gc, gx, gd

    return tape._record("scan", tuple(tensors), y, vjp)


# ---------------------------------------------------------------------------
# generic record surface, backward, gradient checking
# ---------------------------------------------------------------------------

_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "matmul": matmul,
    "sum": reduce_sum,
    "reshape": reshape,
    "slice": slice_axis,
    "take_rows": take_rows,
    "detach": detach,
    "linear": linear,
    "conv1d": conv1d_causal,
    "scan": selective_scan,
}


def record(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the named primitive; the result is recorded on the inputs' tape."""
    if kind == "concat":
        return concat(list(inputs), **kwargs)
    try:
        op = _OPS[kind]
    except KeyError:
        raise ConfigError(f"unknown op kind '{kind}'")
    return op(*inputs, **kwargs)


def backward(output: Tensor, seed=None) -> GradientMap:
    """Accumulate gradients of ``output`` with respect to every tape node.

    ``output`` must be scalar unless an explicit ``seed`` array of the output's
    shape is supplied.  The tape is read, never modified, so repeated calls
    give bitwise-identical results.
    """
    if not isinstance(output, Tensor):
        raise ConfigError("backward: output must be a Tensor")
    tape = output.tape
    if seed is None:
        if output.size != 1:
            raise ConfigError(
                f"backward: output has shape {output.shape}; pass a seed for non-scalars")
        seed_arr = np.ones(output.shape)
    else:
        seed_arr = np.ascontiguousarray(seed, dtype=np.float64)
        if seed_arr.shape != output.shape:
            raise ShapeError(
                f"backward: seed shape {seed_arr.shape} != output shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.node_id: seed_arr}
    for node in reversed(tape.nodes):
        g = grads.get(node.output_id)
        if g is None:
            continue
        for nid, gin in zip(node.input_ids, node.vjp(g)):
            if gin is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gin if prev is None else prev + gin
    return GradientMap(tape, grads)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a leaf tensor to a scalar tensor using recorded operations.
    Values produced by ``detach`` during the reference run are frozen and
    replayed during the perturbed evaluations, so the comparison is against
    the function with stopped gradients held constant, matching what backward
    computes.  Returns ``max_i |ad_i - fd_i| / (|fd_i| + step)``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    ref_tape = Tape()
    ref_tape._detach_log = []
    leaf = ref_tape.tensor(x)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ConfigError("grad_check: f must return a scalar Tensor")
    ad = backward(out).of(leaf).ravel()
    frozen = ref_tape._detach_log

    def value_at(arr: np.ndarray) -> float:
        tape = Tape()
        tape._detach_replay = iter(frozen)
        return f(tape.tensor(arr)).item()

    flat = x.ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += step
        down = flat.copy()
        down[i] -= step
        fd[i] = (value_at(up.reshape(x.shape)) - value_at(down.reshape(x.shape))) \
            / (2.0 * step)
    return float(np.max(np.abs(ad - fd) / (np.abs(fd) + step)))
