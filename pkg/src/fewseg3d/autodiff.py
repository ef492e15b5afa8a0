"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything trainable in this package (edge-conv feature extractor, masked
patch encoder, denoiser, prototype alignment blocks, losses) is expressed
with the ops below, so a single finite-difference harness can certify the
whole gradient path. Arrays are kept in whatever float dtype they come in
with; float64 inputs give extended-precision graphs for gradient checks.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        self.data = arr if arr.dtype.kind == "f" else arr.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward_fn) -> Tensor:
    """Create an op node; collapses to a constant when no parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = astensor(a), astensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = astensor(a), astensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = astensor(a), astensor(b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data / b.data, (a, b), bw)


def matmul(a, b):
    a, b = astensor(a), astensor(b)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), bw)


def transpose(a, axes=None):
    a = astensor(a)
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(ax)

    def bw(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(ax), (a,), bw)


def swapaxes(a, ax1, ax2):
    a = astensor(a)

    def bw(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), bw)


def reshape(a, shape):
    a = astensor(a)
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)

    return _node(a.data.reshape(shape), (a,), bw)


def concat(parts, axis=0):
    parts = [astensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def gather(a, idx):
    """Index rows of `a` (axis 0) with an integer array; out shape idx.shape + a.shape[1:]."""
    a = astensor(a)
    idx = np.asarray(idx)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(a.data[idx], (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gx = np.asarray(g)
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def tmax(a, axis, keepdims=False):
    """Max over one axis; gradient routes to the first argmax (ties take the lowest index)."""
    a = astensor(a)
    if not (_GRAD_ENABLED and a.requires_grad):
        return Tensor(a.data.max(axis=axis, keepdims=keepdims))
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def bw(g):
        gx = np.asarray(g)
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gx, axis=axis)
        return (ga,)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (a,), bw)


def exp(a):
    a = astensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), bw)


def log(a):
    a = astensor(a)

    def bw(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), bw)


def sqrt(a):
    a = astensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), bw)


def leaky_relu(a, slope=0.2):
    a = astensor(a)
    out = np.maximum(a.data, slope * a.data)  # slope in [0, 1)
    if not (_GRAD_ENABLED and a.requires_grad):
        return Tensor(out)
    pos = a.data > 0

    def bw(g):
        return (np.where(pos, g, slope * g),)

    return _node(out, (a,), bw)


def relu(a):
    return leaky_relu(a, slope=0.0)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    """Softmax along `axis`, stabilised by subtracting the (detached) max."""
    a = astensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def row_norms(a, axis=-1, keepdims=True):
    return sqrt(tsum(mul(a, a), axis=axis, keepdims=keepdims))


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    return add(mul(xn, gain), bias)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root: Tensor):
    """Accumulate gradients of `root` (any shape; seeded with ones) into leaf .grad."""
    order: list[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

def parameter(data, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def normal_param(rng, shape, std, name=None) -> Tensor:
    return parameter(rng.standard_normal(shape) * std, name=name)


def zeros_param(shape, name=None) -> Tensor:
    return parameter(np.zeros(shape), name=name)


class Adam:
    """Adam over a dict of named parameter Tensors."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[k] = b1 * self._m[k] + (1 - b1) * p.grad
            v = self._v[k] = b2 * self._v[k] + (1 - b2) * (p.grad * p.grad)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
