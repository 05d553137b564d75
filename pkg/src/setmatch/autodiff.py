"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The engine is tape based: a :class:`Tape` records one forward pass as an
append-only list of operation nodes, so creation order is already a valid
topological order and the backward sweep is a single reversed loop.  Only the
operations needed by the matching loss are provided; there is no broadcasting
beyond scalar-with-array, no GPU path and no higher-order derivatives.

Tensors are either *attached* to a tape (they carry a ``tape_id`` and receive
gradients) or *detached* (plain values; operations on detached tensors are
computed eagerly and never recorded).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "GradientMap",
    "constant",
    "backward",
    "finite_diff_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "maximum",
    "minimum",
    "tensor_sum",
    "gather",
    "matvec",
    "stack",
    "reshape",
    "log_softmax",
]


def _as_values(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tape:
    """Append-only record of one forward pass.

    Each node stores the ids of its tape-attached parents and a closure that
    maps the upstream gradient to one contribution per parent.  A tape has a
    single owner: record one forward pass, run :func:`backward`, then drop the
    reference.  Distinct tapes are independent and may live on separate
    threads.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[tuple[int, ...], Callable | None]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, parents: tuple[int, ...], backward_fn: Callable | None) -> int:
        self._nodes.append((parents, backward_fn))
        return len(self._nodes) - 1

    def leaf(self, values) -> "Tensor":
        """Create a tape-attached leaf tensor holding ``values``."""
        return Tensor(_as_values(values), self, self._record((), None))


class Tensor:
    """Dense float64 array, optionally attached to a gradient tape."""

    __slots__ = ("values", "tape", "tape_id")

    def __init__(self, values, tape: Tape | None = None, tape_id: int | None = None):
        self.values = _as_values(values)
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def attached(self) -> bool:
        return self.tape is not None

    def detach(self) -> "Tensor":
        """A view of the same values with no tape attachment."""
        return Tensor(self.values)

    def item(self) -> float:
        return float(self.values)

    def __float__(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", tape_id={self.tape_id}"
        return f"Tensor({self.values!r}{tag})"

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    # arithmetic sugar; scalars are lifted to detached constants
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


def constant(values) -> Tensor:
    """A detached tensor; it never receives gradient."""
    return Tensor(_as_values(values))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _result_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands live on different tapes")
    return tape


def _make(values: np.ndarray, tape: Tape | None, parents, backward_fn) -> Tensor:
    """Wrap ``values``; record a node only if some parent is attached."""
    attached = [p for p in parents if p.tape_id is not None]
    if tape is None or not attached:
        return Tensor(values)
    ids = tuple(p.tape_id for p in attached)
    mask = tuple(p.tape_id is not None for p in parents)

    def fn(g, _inner=backward_fn, _mask=mask):
        contribs = _inner(g)
        return tuple(c for c, keep in zip(contribs, _mask) if keep)

    return Tensor(values, tape, tape._record(ids, fn))


def _check_elementwise(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse the gradient of a scalar operand that was combined with an array
    if shape == ():
        return np.asarray(np.sum(g), dtype=np.float64)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a.values, b.values)
    out = a.values + b.values

    def back(g):
        return (_reduce_to(g, a.values.shape), _reduce_to(g, b.values.shape))

    return _make(out, _result_tape(a, b), (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a.values, b.values)
    out = a.values - b.values

    def back(g):
        return (_reduce_to(g, a.values.shape), _reduce_to(-g, b.values.shape))

    return _make(out, _result_tape(a, b), (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a.values, b.values)
    av, bv = a.values, b.values
    out = av * bv

    def back(g):
        return (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape))

    return _make(out, _result_tape(a, b), (a, b), back)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a.values, b.values)
    av, bv = a.values, b.values
    if np.any(bv == 0.0):
        raise ValueError("division by zero")
    out = av / bv

    def back(g):
        return (
            _reduce_to(g / bv, av.shape),
            _reduce_to(-g * av / (bv * bv), bv.shape),
        )

    return _make(out, _result_tape(a, b), (a, b), back)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.values, a.tape, (a,), lambda g: (-g,))


def absolute(a) -> Tensor:
    """|a|, with subgradient 0 at the kink."""
    a = _lift(a)
    sign = np.sign(a.values)
    return _make(np.abs(a.values), a.tape, (a,), lambda g: (g * sign,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.values)
    return _make(out, a.tape, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log; requires strictly positive input."""
    a = _lift(a)
    if np.any(a.values <= 0.0):
        raise ValueError("log requires strictly positive input")
    av = a.values
    return _make(np.log(av), a.tape, (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.values)
    return _make(out, a.tape, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    av = a.values
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)

    def back(g):
        return (g * out * (1.0 - out),)

    return _make(out, a.tape, (a,), back)


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at 0 is taken as 0."""
    a = _lift(a)
    gate = a.values > 0.0
    return _make(np.where(gate, a.values, 0.0), a.tape, (a,), lambda g: (g * gate,))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = _lift(a), _lift(b)
    _check_elementwise(a.values, b.values)
    first = a.values >= b.values
    out = np.where(first, a.values, b.values)

    def back(g):
        return (
            _reduce_to(g * first, a.values.shape),
            _reduce_to(g * ~first, b.values.shape),
        )

    return _make(out, _result_tape(a, b), (a, b), back)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    a, b = _lift(a), _lift(b)
    _check_elementwise(a.values, b.values)
    first = a.values <= b.values
    out = np.where(first, a.values, b.values)

    def back(g):
        return (
            _reduce_to(g * first, a.values.shape),
            _reduce_to(g * ~first, b.values.shape),
        )

    return _make(out, _result_tape(a, b), (a, b), back)


def tensor_sum(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _lift(a)
    shape = a.values.shape
    out = np.asarray(np.sum(a.values), dtype=np.float64)
    return _make(out, a.tape, (a,), lambda g: (np.full(shape, float(g)),))


def gather(a, indices) -> Tensor:
    """Select entries of ``a`` (viewed flat) at ``indices``; backward scatter-adds."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("indices must be one-dimensional")
    flat = a.values.ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise IndexError("gather index out of range")
    out = flat[idx]
    shape = a.values.shape

    def back(g):
        z = np.zeros(flat.size, dtype=np.float64)
        np.add.at(z, idx, g)
        return (z.reshape(shape),)

    return _make(out, a.tape, (a,), back)


def matvec(w, x) -> Tensor:
    """Matrix-vector product: (m, n) @ (n,) -> (m,)."""
    w, x = _lift(w), _lift(x)
    if w.values.ndim != 2 or x.values.ndim != 1 or w.values.shape[1] != x.values.shape[0]:
        raise ValueError(f"matvec shape mismatch: {w.values.shape} @ {x.values.shape}")
    wv, xv = w.values, x.values
    out = wv @ xv

    def back(g):
        return (np.outer(g, xv), wv.T @ g)

    return _make(out, _result_tape(w, x), (w, x), back)


def stack(tensors: Sequence) -> Tensor:
    """Stack same-shape scalars or vectors along a new leading axis."""
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("stack needs at least one tensor")
    shape = ts[0].values.shape
    for t in ts:
        if t.values.shape != shape:
            raise ValueError("stack requires identical shapes")
    out = np.stack([t.values for t in ts])

    def back(g):
        return tuple(g[i] for i in range(len(ts)))

    return _make(out, _result_tape(*ts), tuple(ts), back)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.values.shape
    out = a.values.reshape(shape)
    return _make(out, a.tape, (a,), lambda g: (g.reshape(old),))


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax over the last axis, stable for any finite input.

    Computed with max subtraction, so exp never overflows and
    ``exp(log_softmax(x))`` sums to one along the last axis.
    """
    a = _lift(a)
    av = a.values
    if av.ndim not in (1, 2):
        raise ValueError("log_softmax expects a vector or a matrix of rows")
    m = np.max(av, axis=-1, keepdims=True)
    shifted = av - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * np.sum(g, axis=-1, keepdims=True),)

    return _make(out, a.tape, (a,), back)


# ---------------------------------------------------------------------------
# backward sweep and certification
# ---------------------------------------------------------------------------


class GradientMap:
    """Result of :func:`backward`: gradients keyed by tape id.

    Indexing with an attached tensor returns its gradient as a detached
    tensor (zeros if no gradient reached it).  Detached tensors are rejected:
    they never take part in differentiation.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __contains__(self, t: Tensor) -> bool:
        return t.tape_id in self._grads

    def __getitem__(self, t: Tensor) -> Tensor:
        return Tensor(self.array(t))

    def array(self, t: Tensor) -> np.ndarray:
        if t.tape_id is None:
            raise ValueError("detached tensor carries no gradient")
        g = self._grads.get(t.tape_id)
        if g is None:
            return np.zeros_like(t.values)
        return g


def backward(root: Tensor) -> GradientMap:
    """Reverse sweep from a scalar root; returns gradients for all reached nodes.

    Accumulation order is fixed by node creation order, so repeated sweeps
    over the same tape produce bit-identical gradients.
    """
    if root.tape is None or root.tape_id is None:
        raise ValueError("backward root must be tape-attached")
    if root.values.size != 1:
        raise ValueError("backward root must be scalar")
    nodes = root.tape._nodes
    grads: list[np.ndarray | None] = [None] * (root.tape_id + 1)
    grads[root.tape_id] = np.ones_like(root.values)
    for nid in range(root.tape_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        parents, fn = nodes[nid]
        if fn is None:
            continue
        for pid, contrib in zip(parents, fn(g)):
            prev = grads[pid]
            grads[pid] = contrib if prev is None else prev + contrib
    out: dict[int, np.ndarray] = {}
    for nid, g in enumerate(grads):
        if g is not None:
            g = np.asarray(g, dtype=np.float64)
            g.flags.writeable = False
            out[nid] = g
    return GradientMap(out)


def finite_diff_gradient(f: Callable[[np.ndarray], float], params, step: float = 1e-4) -> Tensor:
    """Central-difference gradient of ``f`` at ``params``, one coordinate at a time.

    ``f`` receives a plain float64 array and must return a finite scalar.
    This is the certification oracle for the analytic backward pass and stays
    independent of it.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = _as_values(params.values if isinstance(params, Tensor) else params).copy()
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(x))
        flat[k] = orig - step
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("objective returned a non-finite value")
        gflat[k] = (fp - fm) / (2.0 * step)
    return Tensor(grad)
