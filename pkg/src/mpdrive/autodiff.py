"""Reverse-mode automatic differentiation over dense float64 arrays.

A deliberately small engine: just enough ops to express conv/deconv
networks, explicit-mask dropout, reductions, and multi-step unrolled
objectives as one differentiable graph. CPU only, float64 throughout so
finite-difference checks are meaningful. A graph and its tensors belong
to a single thread; parameter snapshots may be shared read-only.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "DropoutMask",
    "FiniteError",
    "GraphError",
    "apply_dropout",
    "backward",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "dropout",
    "grad_check",
    "l2norm",
    "no_grad",
    "smooth_max",
    "stop_gradient",
    "variance",
    "PRIMITIVE_OPS",
]

# Primitive ops with their own backward rule; composites (variance, l2norm,
# smooth_max, softplus-of-ops etc.) are built from these.
PRIMITIVE_OPS = (
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sqrt",
    "tanh", "sigmoid", "relu", "softplus", "matmul",
    "conv2d", "conv_transpose2d",
    "reshape", "concat", "slice",
    "sum", "mean", "max",
    "dropout", "stop_gradient", "clip",
)


class FiniteError(ArithmeticError):
    """An op produced NaN or Inf; the graph is poisoned and unusable."""


class GraphError(ValueError):
    """Invalid graph usage (non-scalar loss, unsupported shapes, ...)."""


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction for cheap inference."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad, shape):
    # adjoint of numpy broadcasting: sum grad down to `shape`
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array node in a reverse-mode graph.

    ``grad`` is populated on requires_grad leaves after ``backward``;
    intermediate adjoints live only inside the backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ----------------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return mul(self, self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def slice(self, axis, start, stop):
        return slice_axis(self, axis, start, stop)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, vjp, op):
    """Wrap an op output, checking finiteness and wiring the graph."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FiniteError(f"non-finite values in output of op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._vjp = vjp if needs else None
    out._op = op
    return out


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp, "div")


def neg(a):
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = _lift(a)
    p = float(p)

    def vjp(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _make(np.power(a.data, p), (a,), vjp, "pow")


def exp(a):
    a = _lift(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a):
    a = _lift(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        # subgradient 0 at exactly 0 so norms of zero vectors stay finite
        denom = np.where(out_data > 0.0, 2.0 * out_data, 1.0)
        return (np.where(out_data > 0.0, g / denom, 0.0),)

    return _make(out_data, (a,), vjp, "sqrt")


def tanh(a):
    a = _lift(a)
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")


def sigmoid(a):
    a = _lift(a)
    out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return _make(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),), "sigmoid")


def relu(a):
    a = _lift(a)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _make(np.maximum(a.data, 0.0), (a,), vjp, "relu")


def softplus(a):
    a = _lift(a)

    def vjp(g):
        return (g / (1.0 + np.exp(-np.clip(a.data, -500, 500))),)

    return _make(np.logaddexp(0.0, a.data), (a,), vjp, "softplus")


def clip(a, lo, hi):
    a = _lift(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)

    def vjp(g):
        # pass-through inside the (closed) interval, zero outside
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make(np.clip(a.data, lo, hi), (a,), vjp, "clip")


# -- linear algebra -------------------------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise GraphError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


# -- shape ops -------------------------------------------------------------------


def reshape(a, *shape):
    a = _lift(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), vjp, "reshape")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), vjp, "concat")


def slice_axis(a, axis, start, stop):
    a = _lift(a)
    slicer = [slice(None)] * a.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[slicer] = g
        return (full,)

    return _make(a.data[slicer], (a,), vjp, "slice")


# -- reductions -------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = _lift(a)
    axis = _norm_axis(axis, a.ndim)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = _lift(a)
    axis = _norm_axis(axis, a.ndim)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp, "mean")


def reduce_max(a, axis=None, keepdims=False):
    """Hard max; on ties the subgradient routes to the first maximizer."""
    a = _lift(a)
    if axis is None:
        out_data = a.data.max()

        def vjp(g):
            mask = np.zeros_like(a.data)
            mask[np.unravel_index(np.argmax(a.data), a.shape)] = 1.0
            return (mask * g,)

        return _make(out_data, (a,), vjp, "max")

    ax = axis % a.ndim
    out_data = a.data.max(axis=ax, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        idx = np.argmax(a.data, axis=ax)
        mask = np.zeros_like(a.data)
        np.put_along_axis(mask, np.expand_dims(idx, ax), 1.0, axis=ax)
        return (mask * g,)

    return _make(out_data, (a,), vjp, "max")


# -- dropout and graph control -------------------------------------------------


def dropout(x, mask_values, rate):
    """Inverted dropout with an explicit binary mask (no RNG in the op)."""
    x = _lift(x)
    if not 0.0 <= rate < 1.0:
        raise GraphError(f"dropout rate must be in [0, 1), got {rate}")
    scale = 1.0 / (1.0 - rate)
    m = np.asarray(mask_values, dtype=np.float64)

    def vjp(g):
        return (_unbroadcast(g * m * scale, x.shape),)

    return _make(x.data * m * scale, (x,), vjp, "dropout")


def stop_gradient(a):
    a = _lift(a)
    return _make(a.data.copy(), (), None, "stop_gradient")


# -- convolutions ----------------------------------------------------------------


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(x, kh, kw, sh, sw, ph, pw, oh, ow):
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, oh, ow),
        (s[0], s[1], s[2], s[3], s[2] * sh, s[3] * sw), writeable=False)
    return view.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, out_shape, kh, kw, sh, sw, ph, pw, oh, ow):
    # exact adjoint of _im2col onto a canvas of shape out_shape
    n, c, h, w = out_shape
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += cols[:, :, i, j]
    return xp[:, :, ph:h + ph, pw:w + pw]


def conv2d(x, w, stride=1, padding=0):
    """2-D convolution (cross-correlation), x: (N,C,H,W), w: (F,C,KH,KW)."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise GraphError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, width = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (width + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise GraphError(f"conv2d output collapsed: x {x.shape}, w {w.shape}")
    cols = _im2col(x.data, kh, kw, sh, sw, ph, pw, oh, ow)
    w2 = w.data.reshape(f, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, f, oh, ow)

    def vjp(g):
        gf = g.reshape(n, f, oh * ow)
        dw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w2.T, gf)
        dx = _col2im(dcols, x.shape, kh, kw, sh, sw, ph, pw, oh, ow)
        return dx, dw

    return _make(out, (x, w), vjp, "conv2d")


def conv_transpose2d(x, w, stride=1, padding=0, output_padding=0):
    """Transposed convolution, x: (N,C,H,W), w: (C,F,KH,KW)."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise GraphError(f"conv_transpose2d shape mismatch: x {x.shape}, w {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    n, c, h, width = x.shape
    _, f, kh, kw = w.shape
    oh = (h - 1) * sh - 2 * ph + kh + oph
    ow = (width - 1) * sw - 2 * pw + kw + opw
    if oh <= 0 or ow <= 0:
        raise GraphError(f"conv_transpose2d output collapsed: x {x.shape}, w {w.shape}")
    w2 = w.data.reshape(c, f * kh * kw)
    xf = x.data.reshape(n, c, h * width)
    cols = np.matmul(w2.T, xf)
    out = _col2im(cols, (n, f, oh, ow), kh, kw, sh, sw, ph, pw, h, width)

    def vjp(g):
        dcols = _im2col(g, kh, kw, sh, sw, ph, pw, h, width)
        dx = np.matmul(w2, dcols).reshape(x.shape)
        dw = np.matmul(xf, dcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        return dx, dw

    return _make(out, (x, w), vjp, "conv_transpose2d")


# -- composites ------------------------------------------------------------------


def variance(a, axis=None, keepdims=False):
    """Population variance (1/N) built from primitives."""
    m = reduce_mean(a, axis, keepdims=True)
    d = sub(a, m)
    return reduce_mean(mul(d, d), axis, keepdims)


def l2norm(a):
    return sqrt(reduce_sum(mul(a, a)))


def smooth_max(a, tau, axis=None, keepdims=False):
    """Softmax-weighted mean: a lower bound on max converging as tau grows."""
    shift = stop_gradient(reduce_max(a, axis, keepdims=True))
    e = exp(mul(sub(a, shift), _lift(float(tau))))
    w = div(e, reduce_sum(e, axis, keepdims=True))
    return reduce_sum(mul(w, a), axis, keepdims)


# -- backward ---------------------------------------------------------------------


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate .grad on every reachable requires_grad leaf of ``loss``.

    Repeated calls accumulate, matching the usual zero_grad/step cycle.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    adj = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad and node._op == "leaf":
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise FiniteError(f"non-finite gradient out of op '{node._op}'")
            cur = adj.get(id(parent))
            adj[id(parent)] = pg if cur is None else cur + pg
    # leaves that never received gradient get explicit zeros
    for node in order:
        if node._op == "leaf" and node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)


# -- dropout masks -----------------------------------------------------------------


def _layer_key(layer: str) -> int:
    return int.from_bytes(hashlib.blake2b(layer.encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class DropoutMask:
    """Replayable binary dropout mask bound to one named layer.

    The same (seed, rate, layer, shape) always regenerates identical values.
    """

    seed: int
    rate: float
    layer: str

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    def values(self, shape) -> np.ndarray:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, _layer_key(self.layer)])
        rng = np.random.Generator(np.random.PCG64(ss))
        return (rng.random(shape) >= self.rate).astype(np.float64)


def apply_dropout(x, mask: DropoutMask):
    """x * mask / (1 - rate); expectation-preserving, differentiable through kept units."""
    x = _lift(x)
    return dropout(x, mask.values(x.shape), mask.rate)


# -- gradient checking ---------------------------------------------------------------


def grad_check(f, xs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the list of leaf tensors ``xs`` to a scalar Tensor and must be
    deterministic (fixed masks, fixed latent draws). Error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    xs = list(xs)
    for x in xs:
        x.zero_grad()
    loss = f(xs)
    backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    worst = 0.0
    for xi, x in enumerate(xs):
        flat = x.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = f(xs).item()
            flat[j] = orig - eps
            lo = f(xs).item()
            flat[j] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FiniteError("function non-finite at finite-difference probe")
            num = (hi - lo) / (2.0 * eps)
            ana = analytic[xi].reshape(-1)[j]
            err = abs(ana - num) / (abs(ana) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst
