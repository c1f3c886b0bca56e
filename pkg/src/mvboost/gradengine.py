"""Minimal reverse-mode differentiation over dense float64 arrays.

A ``Tensor`` records the op that produced it together with a closure that maps
the output gradient to input gradients.  ``backward`` walks the graph in
reverse topological order and accumulates gradients in a fixed order, so a
single-threaded run is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ContractError(RuntimeError):
    """Raised when a caller breaks the engine's usage contract."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __array_ufunc__ = None      # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents      # tuple of (Tensor, vjp) pairs
        self._op = _op

    # -- basics --------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph construction -------------------------------------------
    @staticmethod
    def _make(data, parents, op):
        live = tuple((p, f) for p, f in parents if p.requires_grad)
        return Tensor(data, requires_grad=bool(live), _parents=live, _op=op)

    def backward(self, grad=None):
        backward(self, grad)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data + other.data, (
            (self, lambda g: _unbroadcast(g, self.shape)),
            (other, lambda g: _unbroadcast(g, other.shape)),
        ), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, ((self, lambda g: -g),), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (
            (self, lambda g: _unbroadcast(g * b, self.shape)),
            (other, lambda g: _unbroadcast(g * a, other.shape)),
        ), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (
            (self, lambda g: _unbroadcast(g / b, self.shape)),
            (other, lambda g: _unbroadcast(-g * a / (b * b), other.shape)),
        ), "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        a = self.data
        return Tensor._make(a ** p, ((self, lambda g: g * p * a ** (p - 1)),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        shape = self.shape

        fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def vjp(g):
            out = np.zeros(shape)
            if fancy:
                np.add.at(out, idx, g)
            else:
                out[idx] += g
            return out
        return Tensor._make(self.data[idx], ((self, vjp),), "getitem")

    # -- reductions and shape ------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), ((self, vjp),), "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), ((self, lambda g: g.reshape(old)),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), ((self, lambda g: g.transpose(inv)),), "transpose")

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    # -- elementwise nonlinearities ---------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, ((self, lambda g: g * out),), "exp")

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), ((self, lambda g: g / a),), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, ((self, lambda g: g * 0.5 / out),), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, ((self, lambda g: g * (1.0 - out * out)),), "tanh")

    def sigmoid(self):
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(out, ((self, lambda g: g * out * (1.0 - out)),), "sigmoid")

    def softplus(self):
        a = self.data
        out = np.logaddexp(0.0, a)
        return Tensor._make(out, ((self, lambda g: g * 0.5 * (1.0 + np.tanh(0.5 * a))),), "softplus")

    def relu(self):
        a = self.data
        return Tensor._make(np.maximum(a, 0.0), ((self, lambda g: g * (a > 0)),), "relu")

    def gelu(self):
        # tanh approximation; smooth everywhere, which keeps gradient checks tight
        a = self.data
        c = np.sqrt(2.0 / np.pi)
        u = c * (a + 0.044715 * a * a * a)
        th = np.tanh(u)
        out = 0.5 * a * (1.0 + th)
        du = c * (1.0 + 3 * 0.044715 * a * a)
        return Tensor._make(out, ((self, lambda g: g * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * du)),), "gelu")

    def softmax(self, axis=-1):
        a = self.data
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            return out * (g - (g * out).sum(axis=axis, keepdims=True))
        return Tensor._make(out, ((self, vjp),), "softmax")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ContractError("matmul operands need at least 2 dimensions")
    return Tensor._make(A @ B, (
        (a, lambda g: _unbroadcast(g @ np.swapaxes(B, -1, -2), a.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(A, -1, -2) @ g, b.shape)),
    ), "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    parents = []
    for i, t in enumerate(tensors):
        parents.append((t, (lambda k: lambda g: np.split(g, cuts, axis=axis)[k])(i)))
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(parents), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([as_tensor(t).reshape(*_expand_shape(as_tensor(t).shape, axis)) for t in tensors], axis)


def _expand_shape(shape, axis):
    shape = list(shape)
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(axis, 1)
    return shape


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gain + bias


def custom_op(inputs: Sequence[Tensor], forward: Callable, backward_fn: Callable, name="custom") -> Tensor:
    """Wrap an external differentiable computation.

    ``forward(*arrays)`` returns the output array; ``backward_fn(grad_out)``
    returns one gradient array per input (called after ``forward``).
    """
    inputs = [as_tensor(t) for t in inputs]
    out = forward(*(t.data for t in inputs))
    cache: dict = {}

    def grads(g):
        if "g" not in cache or cache["key"] is not g:
            cache["g"] = backward_fn(g)
            cache["key"] = g
        return cache["g"]
    parents = tuple((t, (lambda k: lambda g: grads(g)[k])(i)) for i, t in enumerate(inputs))
    return Tensor._make(out, parents, name)


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p, _ in reversed(node._parents):
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf
    that requires grad.  Intermediate gradients are not retained."""
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, vjp in node._parents:
            pg = vjp(g)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking

def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               samples: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    With ``samples`` set, only that many randomly chosen components per
    parameter are probed.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = rng.choice(flat.size, samples, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(an.reshape(-1)[i], fd)))
    for p in params:
        p.zero_grad()
    return worst
