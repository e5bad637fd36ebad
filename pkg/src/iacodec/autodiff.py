"""Tape-based reverse-mode differentiation on float64 numpy arrays.

A forward pass runs inside a ``record()`` context, which collects one node
per primitive application.  ``backward(loss, tape)`` replays the nodes in
reverse and accumulates gradients into the ``grad`` field of every leaf
tensor that has ``requires_grad`` set.  With no active tape the same
primitives run as plain numpy code, which is the evaluation path.

Tensors carry no batch axis; images and latents are (channels, height,
width).  Everything is float64 throughout so finite-difference checks can
run at tight tolerances.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy import special


class Tensor:
    """A value the engine can differentiate through.

    ``grad`` is populated by ``backward`` for leaves with
    ``requires_grad=True`` and accumulates across calls until
    ``zero_grad`` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)


# Recording state is per-thread so independent training runs can fan out
# across threads without sharing a tape.
_TLS = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_TLS, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def record(tape: Tape | None = None):
    """Activate a tape for the duration of the block and yield it."""
    if tape is None:
        tape = Tape()
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _emit(out_data, inputs, backward) -> Tensor:
    # Record only when a tape is active and some input is differentiable;
    # otherwise the result is a plain constant tensor.
    tape = active_tape()
    if tape is not None and any(_tracked(x) for x in inputs):
        out = Tensor(out_data, requires_grad=True)
        # keep positions aligned with the backward closure's outputs;
        # plain-number operands become None slots
        tensors = tuple(x if isinstance(x, Tensor) else None for x in inputs)
        tape.nodes.append(_Node(out, tensors, backward))
        return out
    return Tensor(out_data)


def backward(loss: Tensor, tape: Tape):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf.

    ``loss`` must be a scalar (shape ``()``) tensor.
    """
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    produced = {id(node.out) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if t is None or gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            elif id(t) in produced:
                grads[k] = gi
            else:
                # leaf: fold straight into the persistent grad field
                t.grad = np.array(gi) if t.grad is None else t.grad + gi


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    av, bv = _value(a), _value(b)
    out = av + bv

    def back(g):
        return (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))

    return _emit(out, (a, b), back)


def sub(a, b):
    av, bv = _value(a), _value(b)
    out = av - bv

    def back(g):
        return (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))

    return _emit(out, (a, b), back)


def neg(a):
    av = _value(a)
    return _emit(-av, (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = _value(a), _value(b)
    out = av * bv

    def back(g):
        return (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return _emit(out, (a, b), back)


def div(a, b):
    av, bv = _value(a), _value(b)
    out = av / bv

    def back(g):
        return (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return _emit(out, (a, b), back)


def sqrt(a):
    av = _value(a)
    out = np.sqrt(av)

    def back(g):
        return (g * (0.5 / out),)

    return _emit(out, (a,), back)


def exp(a):
    av = _value(a)
    out = np.exp(av)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    av = _value(a)
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def absolute(a):
    av = _value(a)
    # subgradient 0 at the kink
    return _emit(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def softplus(a):
    av = _value(a)
    out = np.logaddexp(0.0, av)
    return _emit(out, (a,), lambda g: (g * special.expit(av),))


def leaky_relu(a, slope: float = 0.01):
    av = _value(a)
    mask = av >= 0.0
    out = np.where(mask, av, slope * av)
    return _emit(out, (a,), lambda g: (g * np.where(mask, 1.0, slope),))


def clamp(a, lo: float, hi: float):
    av = _value(a)
    out = np.clip(av, lo, hi)
    mask = (av >= lo) & (av <= hi)
    return _emit(out, (a,), lambda g: (g * mask,))


def maximum(a, b):
    av, bv = _value(a), _value(b)
    mask = av >= bv  # a wins ties
    out = np.where(mask, av, bv)

    def back(g):
        return (
            _unbroadcast(g * mask, av.shape),
            _unbroadcast(g * ~mask, bv.shape),
        )

    return _emit(out, (a, b), back)


def erf(a):
    av = _value(a)
    out = special.erf(av)
    coef = 2.0 / math.sqrt(math.pi)
    return _emit(out, (a,), lambda g: (g * coef * np.exp(-av * av),))


def reshape(a, shape):
    av = _value(a)
    old = av.shape
    return _emit(av.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a):
    av = _value(a)
    shape = av.shape
    return _emit(av.sum(), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a):
    av = _value(a)
    shape = av.shape
    n = av.size
    return _emit(av.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape),))


# ------------------------------------------------------- rounding and noise


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties away from zero (plain numpy)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def ste_round(a):
    """Hard round in the forward pass, identity in the backward pass."""
    av = _value(a)
    return _emit(round_half_away(av), (a,), lambda g: (g,))


def add_uniform_noise(a, width: float, rng: np.random.Generator):
    """Add centered uniform noise of the given width; identity backward."""
    if width <= 0.0:
        raise ValueError(f"add_uniform_noise: width must be positive, got {width}")
    av = _value(a)
    out = av + rng.uniform(-0.5 * width, 0.5 * width, size=av.shape)
    return _emit(out, (a,), lambda g: (g,))


# ------------------------------------------------------------- convolutions


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int):
    # xp: (C, Hp, Wp) already padded -> (C*kh*kw, Ho*Wo) column matrix
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s]
    c, ho, wo = win.shape[:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo

def _col2im(dcols: np.ndarray, c: int, kh: int, kw: int, ho: int, wo: int,
            s: int, hp: int, wp: int) -> np.ndarray:
    out = np.zeros((c, hp, wp))
    d = dcols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + ho * s:s, j:j + wo * s:s] += d[:, i, j]
    return out


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """2-D convolution (cross-correlation): x (C,H,W), w (O,C,kh,kw), b (O,)."""
    xv, wv = _value(x), _value(w)
    if xv.ndim != 3 or wv.ndim != 4 or xv.shape[0] != wv.shape[1]:
        raise ValueError(
            f"conv2d: incompatible shapes x={xv.shape} w={wv.shape}"
        )
    o, c, kh, kw = wv.shape
    xp = _pad2d(xv, padding)
    hp, wp = xp.shape[1:]
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = wv.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(o, ho, wo)
    bv = None
    if b is not None:
        bv = _value(b)
        out = out + bv[:, None, None]

    def back(g):
        gmat = g.reshape(o, ho * wo)
        dw = (gmat @ cols.T).reshape(wv.shape)
        dcols = wmat.T @ gmat
        dxp = _col2im(dcols, c, kh, kw, ho, wo, stride, hp, wp)
        dx = dxp if padding == 0 else dxp[:, padding:hp - padding, padding:wp - padding]
        if b is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(1, 2)))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, back)


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 0,
                     output_padding: int = 0):
    """Transposed convolution: x (Ci,H,W), w (Ci,Co,kh,kw), b (Co,).

    Output spatial size is (H-1)*stride - 2*padding + kh + output_padding.
    """
    xv, wv = _value(x), _value(w)
    if xv.ndim != 3 or wv.ndim != 4 or xv.shape[0] != wv.shape[0]:
        raise ValueError(
            f"conv_transpose2d: incompatible shapes x={xv.shape} w={wv.shape}"
        )
    ci, co, kh, kw = wv.shape
    h, wd = xv.shape[1:]
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    ho = hf - 2 * padding + output_padding
    wo = wf - 2 * padding + output_padding
    if ho <= 0 or wo <= 0 or padding + ho > hf or padding + wo > wf:
        raise ValueError(
            f"conv_transpose2d: bad geometry k={kh} s={stride} p={padding} "
            f"op={output_padding} for input {xv.shape}"
        )
    xmat = xv.reshape(ci, h * wd)
    wmat = wv.reshape(ci, co * kh * kw)
    full = _col2im(wmat.T @ xmat, co, kh, kw, h, wd, stride, hf, wf)
    out = full[:, padding:padding + ho, padding:padding + wo]
    bv = None
    if b is not None:
        bv = _value(b)
        out = out + bv[:, None, None]

    def back(g):
        gfull = np.zeros((co, hf, wf))
        gfull[:, padding:padding + ho, padding:padding + wo] = g
        cols_g, _, _ = _im2col(gfull, kh, kw, stride)  # (Co*kh*kw, H*W)
        dx = (wmat @ cols_g).reshape(ci, h, wd)
        dw = (xmat @ cols_g.T).reshape(wv.shape)
        if b is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(1, 2)))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, back)


def gdn(x, beta, gamma, inverse: bool = False):
    """Generalized divisive normalization over channels.

    ``beta`` (C,) and ``gamma`` (C,C) must already be positive; the layer
    owning them applies its reparameterization before calling.  Forward
    divides each channel by sqrt(beta_i + sum_j gamma_ij x_j^2); the
    inverse form multiplies instead.
    """
    c = _value(x).shape[0]
    kernel = reshape(gamma, (c, c, 1, 1))
    norm = conv2d(mul(x, x), kernel, None, stride=1, padding=0)
    denom = sqrt(add(norm, reshape(beta, (c, 1, 1))))
    return mul(x, denom) if inverse else div(x, denom)
