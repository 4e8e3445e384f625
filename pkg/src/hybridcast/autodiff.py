"""Small reverse-mode autodiff over numpy float64 arrays.

A :class:`Tensor` records the op that produced it together with a closure
mapping the output cotangent to cotangents for each parent. Graphs are
built eagerly and differentiated with :func:`backward`. Heavy pieces of the
model (GRU cell, dense layer, symmetric matrix functions) are single fused
ops with hand-written pullbacks so that Python overhead stays per layer,
not per scalar.
"""
from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ContractError(ValueError):
    """Raised when an op's documented precondition does not hold."""


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_pullback", "op", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._pullback = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    # arithmetic sugar
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def mT(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(data, op):
    # one reduction instead of an isfinite mask; nan/inf propagate through the sum
    if _CHECK_FINITE and not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def make(data, parents, pullback, op):
    """Create an op output. ``pullback(g)`` returns one cotangent per parent."""
    data = np.asarray(data, dtype=np.float64)
    _finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._pullback = pullback
    return out


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1 and grad is None:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
    cot = {id(loss): seed}
    for node in reversed(_toposort(loss)):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if node._pullback is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._pullback(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = cot.get(key)
            cot[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make(
        out,
        (a, b),
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float):
    ad = a.data
    return make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    if np.any(ad <= 0):
        raise ContractError("log of non-positive value")
    return make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    out = _sigmoid(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def square(a):
    ad = a.data
    return make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- reductions & shape


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def pull(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(a.data.sum(axis=axis, keepdims=keepdims), (a,), pull, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a):
    return make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap")


def getitem(a, idx):
    shape = a.shape

    def pull(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make(a.data[idx], (a,), pull, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return make(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def stop_gradient(a):
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def pull(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make(ad @ bd, (a, b), pull, "matmul")


def linear(x, W, b=None):
    """Dense layer ``x @ W + b`` on the last axis."""
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data

    def pull(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = (g @ Wd.T).reshape(xd.shape)
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return make(out, parents, pull, "linear")


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), pull, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def pull(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make(out, (a,), pull, "log_softmax")


# ---------------------------------------------------------------- parameters & optimisation


class ParamStore:
    """Named parameter tensors with gradient buffers and freeze flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name, value):
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=name not in self.frozen, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix=""):
        return [n for n in self._params if n.startswith(prefix)]

    def freeze(self, names):
        for n in names:
            self.frozen.add(n)
            self._params[n].requires_grad = False
            self._params[n].grad = None

    def unfreeze(self, names):
        for n in names:
            self.frozen.discard(n)
            self._params[n].requires_grad = True

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self):
        """Gradient per parameter; zeros for frozen or untouched ones."""
        return {
            n: (np.zeros_like(t.data) if t.grad is None or n in self.frozen else t.grad)
            for n, t in self._params.items()
        }

    def state(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load(self, state):
        for n, v in state.items():
            if n not in self._params:
                self.add(n, v)
            else:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != self._params[n].shape:
                    raise ContractError(f"shape mismatch for {n}: {v.shape} vs {self._params[n].shape}")
                self._params[n].data = v.copy()

    def copy(self):
        other = ParamStore()
        other.frozen = set(self.frozen)
        for n, t in self._params.items():
            other.add(n, t.data.copy())
        return other

    def flat(self, names=None):
        names = list(self._params) if names is None else names
        return np.concatenate([self._params[n].data.ravel() for n in names])

    def set_flat(self, vec, names=None):
        names = list(self._params) if names is None else names
        i = 0
        for n in names:
            t = self._params[n]
            t.data = np.asarray(vec[i : i + t.size], dtype=np.float64).reshape(t.shape).copy()
            i += t.size


class Adam:
    def __init__(self, store: ParamStore, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self):
        self.t += 1
        live = [(n, t) for n, t in self.store.items() if n not in self.store.frozen and t.grad is not None]
        scale = 1.0
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((t.grad**2).sum()) for _, t in live))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, t in live:
            g = t.grad * scale
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            if self.lr:
                t.data = t.data - self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}


# ---------------------------------------------------------------- checking


def numeric_grad(f, x: np.ndarray, h=1e-5, direction=None):
    """Central finite difference of scalar ``f`` at ``x``.

    With ``direction`` returns the directional derivative, otherwise the
    full gradient (one pair of evaluations per coordinate).
    """
    x = np.asarray(x, dtype=np.float64)
    if direction is not None:
        return (f(x + h * direction) - f(x - h * direction)) / (2 * h)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
