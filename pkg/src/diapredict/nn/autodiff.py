"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every op accepts plain ``np.ndarray`` values or :class:`Var` handles.  When no
input is a ``Var`` the op simply returns the numpy result, so the same model
code runs as a fast inference path and as a recorded training path.

    tape = Tape()
    W = tape.watch(np.ones((3, 2)), name="W")
    loss = ad.sum(ad.tanh(x @ W))
    grads = tape.gradient(loss, [W])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "node", "name")
    # forces numpy to dispatch mixed expressions (ndarray + Var) to Var
    __array_ufunc__ = None

    def __init__(self, value: Array, tape: "Tape", node: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, node={self.node})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Records ops in execution order; gradients replay the record backwards."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []

    def __len__(self):
        return len(self._parents)

    def watch(self, value, name: str | None = None) -> Var:
        """Register a leaf (usually a parameter tensor)."""
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, (), None, name)

    def _push(self, value, parents, vjp, name=None) -> Var:
        node = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(value, self, node, name)

    def _backprop(self, root: Var, seed: Array) -> list:
        grads: list = [None] * (root.node + 1)
        grads[root.node] = seed
        for i in range(root.node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            parents = self._parents[i]
            if not parents:
                continue
            pgrads = self._vjps[i](g)
            for p, pg in zip(parents, pgrads):
                if p < 0 or pg is None:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
            if i != root.node:
                grads[i] = None
        return grads

    def gradient(self, loss: Var, wrt: Sequence[Var]) -> list[Array]:
        """Gradients of a scalar ``loss`` with respect to ``wrt``.

        Leaves that do not influence ``loss`` get an all-zero gradient.
        """
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        grads = self._backprop(loss, np.ones_like(loss.value))
        out = []
        for v in wrt:
            g = grads[v.node] if v.node <= loss.node else None
            out.append(np.zeros_like(v.value) if g is None else np.asarray(g, dtype=np.float64))
        return out

    def jacobian(self, outputs: Var, wrt: Sequence[Var]) -> Array:
        """Dense Jacobian, one reverse pass per flattened output entry.

        Row ``i`` is the gradient of ``outputs.ravel()[i]`` with respect to the
        concatenation of the flattened ``wrt`` tensors.
        """
        if outputs.tape is not self:
            raise ValueError("outputs were not recorded on this tape")
        n_out = outputs.value.size
        sizes = [v.value.size for v in wrt]
        H = np.zeros((n_out, int(np.sum(sizes))))
        for row in range(n_out):
            seed = np.zeros(outputs.value.size)
            seed[row] = 1.0
            grads = self._backprop(outputs, seed.reshape(outputs.value.shape))
            col = 0
            for v, n in zip(wrt, sizes):
                g = grads[v.node] if v.node <= outputs.node else None
                if g is not None:
                    H[row, col:col + n] = np.ravel(g)
                col += n
        return H


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(a):
    return a.value if isinstance(a, Var) else a


def _node(a) -> int:
    return a.node if isinstance(a, Var) else -1


def _unbroadcast(g: Array, shape) -> Array:
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _record(tape: Tape | None, value, inputs, vjp):
    if tape is None:
        return value
    return tape._push(value, tuple(_node(a) for a in inputs), vjp)


def asarray(x) -> Array:
    return np.asarray(_val(x), dtype=np.float64)


# ----------------------------------------------------------------- arithmetic

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(tape, out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(tape, out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(tape, out, (a, b),
                   lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(tape, out, (a, b),
                   lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)))


def neg(a):
    av = _val(a)
    return _record(_tape_of(a), -av, (a,), lambda g: (-g,))


def square(a):
    av = _val(a)
    return _record(_tape_of(a), av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, b):
    """Matrix product; ``b`` may be a 2-D weight shared across leading batch dims."""
    av, bv = _val(a), _val(b)
    if bv.ndim == 2 and av.ndim > 2:
        # one gemm over flattened leading dims instead of a stacked loop
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def vjp(g):
        a2 = av if av.ndim > 1 else av[None, :]
        g2 = g if av.ndim > 1 else g[None, ...]
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv)
            gb = np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        ga = g2 @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, bv.shape)
        if av.ndim == 1:
            ga = ga[0]
        else:
            ga = _unbroadcast(ga, av.shape)
        return ga, gb

    return _record(tape, out, (a, b), vjp)


# ---------------------------------------------------------------- elementwise

def tanh(a):
    av = _val(a)
    out = np.tanh(av)
    return _record(_tape_of(a), out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    av = _val(a)
    out = 0.5 * np.tanh(0.5 * av) + 0.5
    return _record(_tape_of(a), out, (a,), lambda g: (g * out * (1.0 - out),))


LEAKY_SLOPE = 0.01


def leaky_relu(a, slope: float = LEAKY_SLOPE):
    av = _val(a)
    pos = av > 0
    out = np.where(pos, av, slope * av)
    return _record(_tape_of(a), out, (a,), lambda g: (np.where(pos, g, slope * g),))


def exp(a):
    av = _val(a)
    out = np.exp(av)
    return _record(_tape_of(a), out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    return _record(_tape_of(a), np.log(av), (a,), lambda g: (g / av,))


def softplus(a):
    av = _val(a)
    out = np.logaddexp(0.0, av)
    return _record(_tape_of(a), out, (a,), lambda g: (g * (0.5 * np.tanh(0.5 * av) + 0.5),))


# ----------------------------------------------------------------- reductions

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    shape = av.shape
    return _record(_tape_of(a), out, (a,), lambda g: (np.array(_expand(g, shape, axis, keepdims)),))


def mean(a, axis=None, keepdims: bool = False):
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def logsumexp(a, axis: int = -1, keepdims: bool = False):
    av = _val(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(av - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return out
    p = e / s
    return _record(tape, out, (a,),
                   lambda g: ((g if keepdims else np.expand_dims(g, axis)) * p,))


def softmax(a, axis: int = -1):
    av = _val(a)
    e = np.exp(av - np.max(av, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,),
                   lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


# ------------------------------------------------------------------ structure

def concat(items: Sequence, axis: int = -1):
    vals = [_val(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(tape, out, tuple(items), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(items: Sequence, axis: int = 0):
    vals = [_val(x) for x in items]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out
    n = len(vals)
    return _record(tape, out, tuple(items),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(a, idx):
    """Basic or fancy indexing; gradients scatter-add into the source shape."""
    av = _val(a)
    out = av[idx]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return (z,)

    return _record(tape, out, (a,), vjp)


def reshape(a, shape):
    av = _val(a)
    src = av.shape
    return _record(_tape_of(a), av.reshape(shape), (a,), lambda g: (np.reshape(g, src),))


def swapaxes(a, ax1: int, ax2: int):
    av = _val(a)
    return _record(_tape_of(a), np.swapaxes(av, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def cumsum(a, axis: int = 0):
    av = _val(a)
    out = np.cumsum(av, axis=axis)
    return _record(_tape_of(a), out, (a,),
                   lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))
