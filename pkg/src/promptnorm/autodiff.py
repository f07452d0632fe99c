"""Small dense tensors with a reverse-mode gradient tape.

Every value is a read-only float64 numpy array. Operations on tensors that
carry a tape handle are recorded on that tape; ``backward`` sweeps the tape
in reverse and returns gradients for every watched leaf.

Typical use::

    tape = GradientTape()
    v = tape.watch(Tensor(rows))
    loss = ad.sum(ad.row_pnorms(v, "two"))
    grads = backward(tape, loss)
    grads[v]  # same shape as rows
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Iterator, Literal, Union

import numpy as np

NormKind = Literal["one", "two", "inf"]
NORM_KINDS: tuple[str, ...] = ("one", "two", "inf")

ArrayLike = Union["Tensor", np.ndarray, Sequence, float, int]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """An input is degenerate for the operation (e.g. a zero-norm vector)."""


class NonFiniteError(ValueError):
    """A tensor would contain NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array, optionally bound to a node of a gradient tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: ArrayLike, *, _tape: "GradientTape | None" = None,
                 _node: int | None = None, _owned: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if _owned and isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        self.data = _freeze(arr)
        self.tape = _tape
        self.node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return take_rows(self, rows)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjps: tuple[Callable[[np.ndarray], np.ndarray], ...]
    shape: tuple[int, ...]


class GradientTape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so parents always precede
    children. A tape is meant to live for one training step; call ``reset``
    (or build a new one) before the next.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._leaves: list[int] = []

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def leaves(self) -> tuple[int, ...]:
        return tuple(self._leaves)

    def reset(self) -> None:
        self._nodes.clear()
        self._leaves.clear()

    def watch(self, x: ArrayLike) -> Tensor:
        """Register ``x`` as a leaf and return a tracked view of it."""
        value = x.data if isinstance(x, Tensor) else np.array(x, dtype=np.float64)
        node = len(self._nodes)
        self._nodes.append(_Node((), (), value.shape))
        self._leaves.append(node)
        return Tensor(value, _tape=self, _node=node, _owned=True)

    def _record(self, value: np.ndarray, inputs: Sequence[Tensor],
                vjps: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Tensor:
        parents, fns = [], []
        for t, fn in zip(inputs, vjps):
            if t.tape is self:
                parents.append(t.node)
                fns.append(fn)
        node = len(self._nodes)
        self._nodes.append(_Node(tuple(parents), tuple(fns), value.shape))
        return Tensor(value, _tape=self, _node=node, _owned=True)


class Gradients(Mapping):
    """Gradients of one root, keyed by leaf node id (or by the leaf tensor)."""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = grads

    def __getitem__(self, key: Tensor | int) -> Tensor:
        if isinstance(key, Tensor):
            key = key.node
        return self._grads[key]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)


def backward(tape: GradientTape, root: Tensor) -> Gradients:
    """Reverse sweep from a scalar ``root``; returns d(root)/d(leaf) for all leaves."""
    if root.tape is not tape:
        raise TapeError("root is not recorded on this tape")
    if root.shape != ():
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = tape._nodes
    adj: dict[int, np.ndarray] = {root.node: np.ones((), dtype=np.float64)}
    for idx in range(root.node, -1, -1):
        g = adj.get(idx)
        if g is None:
            continue
        node = nodes[idx]
        for parent, fn in zip(node.parents, node.vjps):
            contrib = fn(g)
            if parent in adj:
                adj[parent] = adj[parent] + contrib
            else:
                adj[parent] = contrib
    out = {}
    for leaf in tape.leaves:
        g = adj.get(leaf)
        if g is None:
            g = np.zeros(nodes[leaf].shape)
        out[leaf] = Tensor(np.array(g, dtype=np.float64).reshape(nodes[leaf].shape))
    return Gradients(out)


# --------------------------------------------------------------------------
# primitives

def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> GradientTape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands are recorded on different tapes")
            tape = x.tape
    return tape


def _emit(value: np.ndarray, inputs: Sequence[Tensor],
          vjps: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value, _owned=True)
    return tape._record(value, inputs, vjps)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: -_unbroadcast(g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product (numpy broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.shape),
                  lambda g: _unbroadcast(g * a.data, b.shape)))


def scale(a: ArrayLike, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), (lambda g: g * c,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b),
                 (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def transpose(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a,), (lambda g: g.T,))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return _emit(a.data.reshape(shape).copy(), (a,), (lambda g: g.reshape(a.shape),))


def take_rows(a: ArrayLike, rows) -> Tensor:
    """Select rows (first axis) by integer index or index list.

    The gradient is scattered back; unselected rows receive exact zeros.
    """
    a = _as_tensor(a)
    idx = np.asarray(rows, dtype=np.intp)
    value = a.data[idx].copy()

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return out

    return _emit(value, (a,), (vjp,))


def tanh(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), (lambda g: g * (1.0 - y * y),))


def sum(a: ArrayLike) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    return _emit(np.array(a.data.sum()), (a,), (lambda g: np.broadcast_to(g, a.shape).copy(),))


def mean(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _emit(np.array(a.data.mean()), (a,),
                 (lambda g: np.broadcast_to(g / n, a.shape).copy(),))


def dot(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot needs equal 1-D shapes, got {a.shape} and {b.shape}")
    return _emit(np.array(a.data @ b.data), (a, b),
                 (lambda g: g * b.data, lambda g: g * a.data))


# --------------------------------------------------------------------------
# norms

def _pnorm_last(x: np.ndarray, p: str) -> np.ndarray:
    if p == "one":
        return np.abs(x).sum(axis=-1)
    if p == "two":
        return np.sqrt((x * x).sum(axis=-1))
    if p == "inf":
        return np.abs(x).max(axis=-1)
    raise ValueError(f"unknown norm kind {p!r}; expected one of {NORM_KINDS}")


def _pnorm_grad_last(x: np.ndarray, norms: np.ndarray, p: str) -> np.ndarray:
    """d‖x‖/dx along the last axis; zero at x = 0, ties of ℓ∞ split equally."""
    if p == "one":
        return np.sign(x)
    if p == "two":
        safe = np.where(norms > 0, norms, 1.0)[..., None]
        return np.where(norms[..., None] > 0, x / safe, 0.0)
    absx = np.abs(x)
    tied = (absx == norms[..., None]) & (norms[..., None] > 0)
    count = np.maximum(tied.sum(axis=-1, keepdims=True), 1)
    return np.sign(x) * tied / count


def vector_pnorm(v: ArrayLike, p: NormKind = "two") -> Tensor:
    """ℓ₁, ℓ₂ or ℓ∞ norm of a 1-D tensor."""
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise DimensionError(f"vector_pnorm needs a 1-D tensor, got {v.shape}")
    n = _pnorm_last(v.data, p)
    local = _pnorm_grad_last(v.data, n, p)
    return _emit(np.array(n), (v,), (lambda g: g * local,))


def row_pnorms(m: ArrayLike, p: NormKind = "two") -> Tensor:
    """Per-row p-norms of a 2-D tensor."""
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"row_pnorms needs a 2-D tensor, got {m.shape}")
    n = _pnorm_last(m.data, p)
    local = _pnorm_grad_last(m.data, n, p)
    return _emit(n, (m,), (lambda g: g[:, None] * local,))


def normalize_rows(m: ArrayLike) -> Tensor:
    """Scale each row to unit ℓ₂ norm; zero rows are rejected."""
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"normalize_rows needs a 2-D tensor, got {m.shape}")
    n = np.sqrt((m.data * m.data).sum(axis=1, keepdims=True))
    if np.any(n == 0):
        raise DegenerateInputError("zero-norm row cannot be normalized")
    y = m.data / n

    def vjp(g):
        return (g - y * (g * y).sum(axis=1, keepdims=True)) / n

    return _emit(y, (m,), (vjp,))


def cosine_similarity(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs equal 1-D shapes, got {a.shape}, {b.shape}")
    d = a.shape[0]
    an = normalize_rows(reshape(a, (1, d)))
    bn = normalize_rows(reshape(b, (1, d)))
    return dot(reshape(an, (d,)), reshape(bn, (d,)))


def cosine_matrix(a: ArrayLike, b: ArrayLike) -> Tensor:
    """All-pairs cosine similarity between the rows of ``a`` (m×d) and ``b`` (n×d)."""
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


# --------------------------------------------------------------------------
# softmax family

def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: ArrayLike) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = _as_tensor(logits)
    s = _softmax_last(x.data)

    def vjp(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _emit(s, (x,), (vjp,))


def log_softmax(logits: ArrayLike) -> Tensor:
    x = _as_tensor(logits)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def vjp(g):
        return g - s * g.sum(axis=-1, keepdims=True)

    return _emit(y, (x,), (vjp,))


def cross_entropy(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    """Summed negative log-likelihood of ``labels`` under row-wise softmax(logits)."""
    x = _as_tensor(logits)
    if x.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs B×C logits, got {x.shape}")
    y = np.asarray(labels, dtype=np.intp)
    if y.shape != (x.shape[0],):
        raise DimensionError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} rows")
    if np.any(y < 0) or np.any(y >= x.shape[1]):
        raise ValueError(f"labels must lie in [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    top = x.data.argmax(axis=1)
    z = x.data - x.data[rows, top][:, None]
    # log1p over the non-max terms keeps precision when the max dominates
    e = np.exp(z)
    e[rows, top] = 0.0
    lse = np.log1p(e.sum(axis=1))
    loss = (lse - z[rows, y]).sum()
    s = _softmax_last(x.data)
    s[rows, y] -= 1.0
    return _emit(np.array(loss), (x,), (lambda g: g * s,))


# --------------------------------------------------------------------------
# verification oracle

def finite_difference_check(loss_fn: Callable[[Tensor], Tensor], leaf: ArrayLike,
                            h: float | None = None) -> float:
    """Max relative error between ``backward`` and central differences.

    ``loss_fn`` maps a tensor shaped like ``leaf`` to a scalar tensor. The step
    defaults to ``1e-5 * max(1, |x_i|)`` per coordinate. The relative error of
    each coordinate uses the denominator ``max(|analytic|, |numeric|, 1e-12)``.
    """
    x0 = _as_tensor(leaf).data
    tape = GradientTape()
    x = tape.watch(x0)
    analytic = backward(tape, loss_fn(x))[x].data

    flat = x0.ravel()
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        step = h if h is not None else 1e-5 * max(1.0, abs(flat[i]))
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = loss_fn(Tensor(hi.reshape(x0.shape))).item()
        f_lo = loss_fn(Tensor(lo.reshape(x0.shape))).item()
        numeric[i] = (f_hi - f_lo) / (2.0 * step)
    a = analytic.ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(a - numeric) / denom))
