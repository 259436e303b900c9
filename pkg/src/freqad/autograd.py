"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Node`` wraps one array value plus the (parent, vjp) edges that produced
it. ``gradients`` walks the graph once in reverse topological order and
accumulates vector-Jacobian products. Complex spectra never enter the graph
directly: the FFT ops expose them as (real, imag) node pairs with hand-derived
linear adjoints, so the rest of the engine stays purely real.

Inside ``no_grad()`` no edges are recorded, which makes inference passes cheap
and garbage-free.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents")

    def __init__(self, value: np.ndarray, parents: tuple = ()):
        self.value = value
        self.parents = parents

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    # arithmetic sugar; heavy lifting happens in the module-level ops
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"


class Parameter(Node):
    """A named leaf that persists across graphs."""

    __slots__ = ("name",)

    def __init__(self, name: str, value: np.ndarray):
        # np.array (not ascontiguousarray) so 0-d scalars keep their shape
        super().__init__(np.array(value, dtype=np.float64, order="C"))
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: np.ndarray, *edges) -> Node:
    if not _GRAD_ENABLED:
        return Node(value)
    return Node(value, tuple(edges))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# =====================================================================
# elementwise ops
# =====================================================================


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value + b.value
    return _make(
        out,
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value - b.value
    return _make(
        out,
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value * b.value
    return _make(
        out,
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return _make(
        out,
        (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
    )


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a, lambda g: g * out))


def log(a) -> Node:
    a = as_node(a)
    return _make(np.log(a.value), (a, lambda g: g / a.value))


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return _make(out, (a, lambda g: g / (2.0 * out)))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0.0
    return _make(a.value * mask, (a, lambda g: g * mask))


def sigmoid(a) -> Node:
    a = as_node(a)
    s = numerics.sigmoid(a.value)
    return _make(s, (a, lambda g: g * s * (1.0 - s)))


def softplus(a) -> Node:
    a = as_node(a)
    out = numerics.softplus(a.value)
    return _make(out, (a, lambda g: g * numerics.sigmoid(a.value)))


def silu(a) -> Node:
    a = as_node(a)
    s = numerics.sigmoid(a.value)
    out = a.value * s
    # d/dx x*s(x) = s(x) * (1 + x * (1 - s(x)))
    return _make(out, (a, lambda g: g * s * (1.0 + a.value * (1.0 - s))))


def amplitude_pair(re, im) -> Node:
    """sqrt(re^2 + im^2) with a zero subgradient at the origin."""
    re, im = as_node(re), as_node(im)
    a = np.hypot(re.value, im.value)
    safe = np.where(a > 0.0, a, 1.0)
    return _make(
        a,
        (re, lambda g: g * np.where(a > 0.0, re.value / safe, 0.0)),
        (im, lambda g: g * np.where(a > 0.0, im.value / safe, 0.0)),
    )


# =====================================================================
# linear algebra and shaping
# =====================================================================


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av @ bv
    if av.ndim == 2 and bv.ndim == 2:
        return _make(out, (a, lambda g: g @ bv.T), (b, lambda g: av.T @ g))
    if av.ndim == 2 and bv.ndim == 1:
        return _make(out, (a, lambda g: np.outer(g, bv)), (b, lambda g: av.T @ g))
    if av.ndim == 1 and bv.ndim == 2:
        return _make(out, (a, lambda g: bv @ g), (b, lambda g: np.outer(av, g)))
    raise ValueError(f"matmul supports 2-D/1-D operands, got {av.shape} @ {bv.shape}")


def transpose(a, axes: tuple[int, ...] | None = None) -> Node:
    a = as_node(a)
    out = np.transpose(a.value, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(out, (a, lambda g: np.transpose(g, inv)))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def getitem(a, idx) -> Node:
    a = as_node(a)
    out = a.value[idx]

    def vjp(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, idx, g)
        return acc

    return _make(np.array(out, copy=True), (a, vjp))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, *[(n, make_vjp(i)) for i, n in enumerate(nodes)])


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(out, *[(n, make_vjp(i)) for i, n in enumerate(nodes)])


def pad_hw(a, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Node:
    """Zero-pad the trailing two axes."""
    a = as_node(a)
    width = [(0, 0)] * (a.value.ndim - 2) + [pad_h, pad_w]
    out = np.pad(a.value, width)
    sl = tuple(
        [slice(None)] * (a.value.ndim - 2)
        + [
            slice(pad_h[0], out.shape[-2] - pad_h[1]),
            slice(pad_w[0], out.shape[-1] - pad_w[1]),
        ]
    )
    return _make(out, (a, lambda g: g[sl]))


# =====================================================================
# reductions
# =====================================================================


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, shape).copy()

    return _make(np.asarray(out), (a, vjp))


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    if axis is None:
        n = a.value.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.value.shape[ax] for ax in axis]))
    else:
        n = a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    y = numerics.stable_softmax(a.value, axis=axis)

    def vjp(g):
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))

    return _make(y, (a, vjp))


def stop_gradient(a) -> Node:
    return constant(as_node(a).value)


# =====================================================================
# FFT pair ops
# =====================================================================


def fft2_real(a) -> tuple[Node, Node]:
    """Unnormalized 2-D DFT of a real map, returned as (real, imag) nodes.

    The transform is real-linear in the input, so the adjoint of each output
    half is a plain forward transform of the cotangent: for X = F x with x
    real, d_x = Re(F g_re) + Im(F g_im).
    """
    a = as_node(a)
    spec = numerics.fft2(a.value)
    re = _make(spec.real.copy(), (a, lambda g: numerics.fft2(g).real))
    im = _make(spec.imag.copy(), (a, lambda g: numerics.fft2(g).imag))
    return re, im


def ifft2_pair_to_real(re, im, imag_tol: float = 1e-6) -> Node:
    """Inverse transform of an (re, im) spectrum pair to a real map.

    Forward is y = Re(F^{-1}(re + i*im)); with the 1/(H*W) inverse convention
    the adjoint is d_spec = F g / (H*W), split back into halves.
    """
    re, im = as_node(re), as_node(im)
    y = numerics.ifft2(re.value + 1j * im.value, imag_tol=imag_tol)
    n = y.shape[-2] * y.shape[-1]
    return _make(
        y,
        (re, lambda g: numerics.fft2(g).real / n),
        (im, lambda g: numerics.fft2(g).imag / n),
    )


# =====================================================================
# backward pass
# =====================================================================


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        s = state.get(id(node), 0)
        if s == 0:
            state[id(node)] = 1
            stack.append(node)
            for parent, _ in node.parents:
                if state.get(id(parent), 0) == 0:
                    stack.append(parent)
        elif s == 1:
            state[id(node)] = 2
            order.append(node)
    return order


def gradients(root: Node, wrt: Iterable[Node]) -> list[np.ndarray]:
    """Accumulated d(root)/d(w) for each w; root must be scalar."""
    if root.value.size != 1:
        raise ValueError(f"gradient root must be scalar, got shape {root.value.shape}")
    order = _topo_order(root)
    acc: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = acc.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            prev = acc.get(id(parent))
            acc[id(parent)] = pg if prev is None else prev + pg
    out = []
    for w in wrt:
        g = acc.get(id(w))
        out.append(np.zeros_like(w.value) if g is None else np.asarray(g))
    return out


# =====================================================================
# parameter registry
# =====================================================================


class ParamRegistry:
    """Ordered collection of named parameters with flat scalar indexing."""

    def __init__(self, params: Iterable[Parameter]):
        self._params: list[Parameter] = list(params)
        names = [p.name for p in self._params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self._offsets = np.cumsum([0] + [p.value.size for p in self._params])

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        for p in self._params:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self._params]

    @property
    def size(self) -> int:
        """Total scalar count across all tensors."""
        return int(self._offsets[-1])

    def _locate(self, i: int) -> tuple[Parameter, int]:
        if not 0 <= i < self.size:
            raise IndexError(f"flat index {i} out of range for {self.size} scalars")
        k = int(np.searchsorted(self._offsets, i, side="right")) - 1
        return self._params[k], i - int(self._offsets[k])

    def get_flat(self, i: int) -> float:
        p, j = self._locate(i)
        return float(p.value.reshape(-1)[j])

    def add_flat(self, i: int, delta: float) -> None:
        p, j = self._locate(i)
        flat = p.value.reshape(-1)
        flat[j] += delta

    def set_flat(self, i: int, value: float) -> None:
        p, j = self._locate(i)
        flat = p.value.reshape(-1)
        flat[j] = value

    def to_vector(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([p.value.reshape(-1) for p in self._params])

    def load_vector(self, v: np.ndarray) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.size != self.size:
            raise ValueError(f"vector has {v.size} scalars, registry has {self.size}")
        for p, a, b in zip(self._params, self._offsets[:-1], self._offsets[1:]):
            p.value[...] = v[int(a) : int(b)].reshape(p.value.shape)
