"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph itself is the tape: every differentiable operation returns a
:class:`Tensor` whose ``node`` records its parent nodes and a vector-Jacobian
rule. :func:`backward` orders the reachable nodes topologically and sweeps
them once, summing contributions for inputs that feed several consumers.

Broadcasting is deliberately narrow. Two operands combine elementwise when
their shapes are equal, when one is a scalar, when one equals the trailing
axis of the other (a bias row), or when both agree on every leading axis and
one has a trailing extent of 1 (a per-row scale). Anything else raises
:class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Gradients",
    "backward",
    "record",
    "as_tensor",
    "detach",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reduce_sum",
    "mean",
    "exp",
    "log",
    "softmax",
    "sigmoid",
    "silu",
    "layer_norm",
    "cross_entropy",
    "mse_loss",
    "mask_fill",
    "take_rows",
    "gather",
    "scatter_rows",
    "concat",
    "reshape",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes are incompatible under the trailing-axis broadcast rule."""


class Node:
    __slots__ = ("parents", "vjp", "leaf")

    def __init__(self, parents: tuple[Node | None, ...], vjp: VJP | None, leaf: Tensor | None = None):
        self.parents = parents
        self.vjp = vjp
        self.leaf = leaf


class Tensor:
    """Dense float64 array with an optional handle into the autodiff graph.

    ``requires_grad=True`` makes the tensor a parameter (a graph leaf).
    Tensors without a node are constants and never receive gradient.
    """

    __slots__ = ("values", "node", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        self.values = arr
        self.name = name
        self.node = Node((), None, leaf=self) if requires_grad else None

    @classmethod
    def _from_op(cls, values: np.ndarray, node: Node | None) -> Tensor:
        t = cls.__new__(cls)
        t.values = values
        t.name = None
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        tag = " grad" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag}, values={self.values!r})"

    def __len__(self) -> int:
        return len(self.values)

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(values: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``values`` as the output of a custom differentiable operation.

    ``vjp(g)`` must return one gradient (or ``None``) per entry of ``inputs``,
    each shaped like that input. If no input is on the graph the result is a
    constant and ``vjp`` is never called.
    """
    parents = tuple(t.node for t in inputs)
    if all(p is None for p in parents):
        return Tensor._from_op(values, None)
    return Tensor._from_op(values, Node(parents, vjp))


class Gradients:
    """Mapping from parameter tensors to their gradient arrays.

    Parameters the loss does not reach map to zeros of the parameter's shape.
    """

    def __init__(self, by_node: dict[int, np.ndarray]):
        self._by_node = by_node

    def __getitem__(self, param: Tensor) -> np.ndarray:
        if param.node is None:
            return np.zeros(param.shape)
        g = self._by_node.get(id(param.node))
        return np.zeros(param.shape) if g is None else g

    def __contains__(self, param: Tensor) -> bool:
        return param.node is not None and id(param.node) in self._by_node

    def get(self, param: Tensor) -> np.ndarray:
        return self[param]


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = {id(root)}
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i < len(node.parents):
            stack.append((node, i + 1))
            p = node.parents[i]
            if p is not None and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor, seed: np.ndarray | None = None) -> Gradients:
    """Gradient of a scalar ``loss`` with respect to every parameter it reaches.

    ``seed`` overrides the incoming gradient (default 1.0); it exists so tests
    can inject a probe cotangent at a non-scalar output.
    """
    if seed is None:
        if loss.values.size != 1 or loss.values.ndim > 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.values)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {loss.shape}")
    if loss.node is None:
        return Gradients({})

    grads: dict[int, np.ndarray] = {id(loss.node): seed}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_toposort(loss.node)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.leaf is not None:
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return Gradients(leaves)


def detach(t: Tensor) -> Tensor:
    """Same values, no graph handle. The values array is shared, not copied."""
    return Tensor._from_op(t.values, None)


# ---------------------------------------------------------------- broadcasting


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(b) == 1 and len(a) > 1 and a[-1:] == b:
        return a
    if len(a) == 1 and len(b) > 1 and b[-1:] == a:
        return b
    if len(a) == len(b) and a[:-1] == b[:-1] and (a[-1] == 1 or b[-1] == 1):
        return a[:-1] + (max(a[-1], b[-1]),)
    raise ShapeError(f"cannot combine shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) < g.ndim:
        return g.reshape(-1, shape[-1]).sum(axis=0)
    return g.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.values, b.values
    need_a, need_b = a.node is not None, b.node is not None

    def vjp(g):
        return (
            _unbroadcast(g * bv, av.shape) if need_a else None,
            _unbroadcast(g * av, bv.shape) if need_b else None,
        )

    return record(av * bv, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.values, (a,), lambda g: (-g,))


def _require_finite(name: str, v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name}: non-finite input")


def exp(a) -> Tensor:
    a = as_tensor(a)
    _require_finite("exp", a.values)
    out = np.exp(a.values)
    return record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    _require_finite("log", a.values)
    if np.any(a.values <= 0):
        raise ValueError("log: input must be strictly positive")
    v = a.values
    return record(np.log(v), (a,), lambda g: (g / v,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.values)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    v = a.values
    s = _sigmoid(v)
    return record(v * s, (a,), lambda g: (g * (s + v * s * (1.0 - s)),))


def mask_fill(a, keep: np.ndarray, fill: float = -np.inf) -> Tensor:
    """Replace entries where ``keep`` is False by ``fill``; those get zero gradient."""
    a = as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise ShapeError(f"mask shape {keep.shape} != tensor shape {a.shape}")
    out = np.where(keep, a.values, fill)
    return record(out, (a,), lambda g: (np.where(keep, g, 0.0),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands (vector-matrix, matrix-vector, ...)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(av.shape) if a.node is not None else None
        gb = (a2.T @ g2).reshape(bv.shape) if b.node is not None else None
        return ga, gb

    return record(av @ bv, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return record(a.values.T, (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- reductions


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return record(np.asarray(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    out = a.values.sum(axis=ax)
    return record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``. Entries equal to -inf get probability exactly 0."""
    a = as_tensor(a)
    v = a.values
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        raise ValueError("softmax: NaN or +inf input")
    m = v.max(axis=axis, keepdims=True)
    if np.any(m == -np.inf):
        raise ValueError("softmax: every entry along the axis is -inf")
    e = np.exp(v - m)
    p = e / e.sum(axis=axis, keepdims=True)
    return record(p, (a,), lambda g: (p * (g - (p * g).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gain=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional gain and bias rows."""
    x = as_tensor(x)
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    inputs: list[Tensor] = [x]
    out = xhat
    gv = None
    if gain is not None:
        gain = as_tensor(gain)
        if gain.shape != v.shape[-1:]:
            raise ShapeError(f"layer_norm gain shape {gain.shape} != {v.shape[-1:]}")
        gv = gain.values
        out = out * gv
        inputs.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != v.shape[-1:]:
            raise ShapeError(f"layer_norm bias shape {bias.shape} != {v.shape[-1:]}")
        out = out + bias.values
        inputs.append(bias)
    lead = v.shape[-1]

    def vjp(g):
        dxhat = g * gv if gv is not None else g
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads: list[np.ndarray | None] = [dx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, lead).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, lead).sum(axis=0))
        return grads

    return record(out, inputs, vjp)


# ---------------------------------------------------------------- losses


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` is (C,) with a scalar label or (B, C) with B labels.
    """
    logits = as_tensor(logits)
    z = logits.values
    _require_finite("cross_entropy", z)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    z2 = z if z.ndim == 2 else z[None, :]
    if z2.ndim != 2 or lab.shape != (z2.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} vs labels {lab.shape}")
    if np.any(lab < 0) or np.any(lab >= z2.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    m = z2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z2 - m).sum(axis=1))
    rows = np.arange(len(lab))
    loss = np.asarray((lse - z2[rows, lab]).mean())
    p = np.exp(z2 - lse[:, None])

    def vjp(g):
        d = p.copy()
        d[rows, lab] -= 1.0
        return ((g / len(lab)) * d.reshape(z.shape),)

    return record(loss, (logits,), vjp)


def mse_loss(pred, target) -> Tensor:
    """Mean over rows of the squared error summed over the last axis."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    rows = 1 if d.ndim < 2 else d.shape[0]
    return mul(reduce_sum(mul(d, d)), 1.0 / rows)


# ---------------------------------------------------------------- indexing


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Rows ``a[idx]`` (repeats allowed; gradients scatter-add back)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return record(a.values[idx], (a,), vjp)


def gather(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elements ``a[rows[j], cols[j]]`` of a 2-D tensor as a 1-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather needs a 2-D tensor, got {a.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return record(a.values[rows, cols], (a,), vjp)


def scatter_rows(a, idx: np.ndarray, n_rows: int) -> Tensor:
    """Zeros of (n_rows, ...) with row ``a[j]`` added into row ``idx[j]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, idx, a.values)
    return record(out, (a,), lambda g: (g[idx],))


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.values for p in parts], axis=axis)
    return record(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))
