"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs require gradients.
Node ids are assigned in creation order, so the tape is topologically
sorted by construction and :meth:`Tape.backward` is a single reverse sweep.

Arrays that do not require gradients (positional encodings, masks, data)
may be passed to every op directly; they are wrapped as untracked constants.
"""
from __future__ import annotations

import builtins
import math
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "EmptyReductionError",
    "NonFiniteError",
    "Node",
    "Tape",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "transpose",
    "exp",
    "ln1p",
    "log",
    "relu",
    "square",
    "reduce",
    "sum",
    "mean",
    "max",
    "concat",
    "take_rows",
    "masked_softmax",
    "softmax",
    "masked_softmax_values",
    "elementwise",
    "custom",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EmptyReductionError(ValueError):
    """Reduction over an axis of extent zero."""


class NonFiniteError(FloatingPointError):
    """A forward value contains NaN or Inf."""


class Node:
    __slots__ = ("value", "tape", "id", "parents", "backward_fn")

    def __init__(self, value, tape=None, id=-1, parents=(), backward_fn=None):
        self.value = value
        self.tape = tape
        self.id = id
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else f"#{self.id}"
        return f"Node({kind}, shape={self.value.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray | None] = []
        self.check_finite = check_finite

    def leaf(self, value) -> Node:
        """Register a trainable input."""
        arr = np.array(value, dtype=np.float64)
        return self._record(arr, (), None)

    def leaves(self, params: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {k: self.leaf(v) for k, v in params.items()}

    def _record(self, value, parents, backward_fn) -> Node:
        if self.check_finite:
            _check_finite(value)
        node = Node(value, self, len(self.nodes), parents, backward_fn)
        self.nodes.append(node)
        self.grads.append(None)
        return node

    def backward(self, root: Node) -> None:
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        grads = [None] * len(self.nodes)
        grads[root.id] = np.ones_like(root.value)
        nodes = self.nodes
        for i in range(root.id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or parent.tape is not self:
                    continue
                j = parent.id
                if grads[j] is None:
                    grads[j] = pg
                else:
                    grads[j] = grads[j] + pg
        self.grads = grads

    def grad(self, node: Node) -> np.ndarray:
        """Accumulated gradient of the last backward root w.r.t. ``node``."""
        g = self.grads[node.id] if node.tape is self else None
        if g is None:
            return np.zeros_like(node.value)
        return np.asarray(g, dtype=np.float64).reshape(node.value.shape)


def constant(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=np.float64))


def _tape_of(*nodes: Node) -> Tape | None:
    tape = None
    for n in nodes:
        if n.tape is not None:
            if tape is not None and n.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = n.tape
    return tape


def _check_finite(value: np.ndarray) -> None:
    # a finite sum implies finite entries; only fall back to the full scan on overflow
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(np.add.reduce(value, axis=None))
    if not math.isfinite(total) and not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value produced (shape {value.shape})")


def _make(value, parents, backward_fn) -> Node:
    tape = _tape_of(*parents)
    if tape is None:
        _check_finite(value)
        return Node(value)
    return tape._record(value, parents, backward_fn)


def custom(value, parents: Sequence, backward_fn: Callable) -> Node:
    """Register an op with a hand-written backward.

    ``backward_fn(g)`` returns one gradient (or ``None``) per parent.
    """
    parents = tuple(constant(p) for p in parents)
    return _make(np.asarray(value, dtype=np.float64), parents, backward_fn)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _fit(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    # undo scalar broadcasting
    if like.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a.value, b.value, "add")
    av, bv = a.value, b.value
    return _make(av + bv, (a, b), lambda g: (_fit(g, av), _fit(g, bv)))


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a.value, b.value, "sub")
    av, bv = a.value, b.value
    return _make(av - bv, (a, b), lambda g: (_fit(g, av), _fit(-g, bv)))


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (_fit(g * bv, av), _fit(g * av, bv)))


def neg(a) -> Node:
    a = constant(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Node:
    a = constant(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def ln1p(a) -> Node:
    a = constant(a)
    av = a.value
    return _make(np.log1p(av), (a,), lambda g: (g / (1.0 + av),))


def log(a, floor: float = 0.0) -> Node:
    """Natural log of ``max(a, floor)``; zero gradient where clamped."""
    a = constant(a)
    av = a.value
    if floor > 0.0:
        clamped = av < floor
        safe = np.where(clamped, floor, av)
        return _make(np.log(safe), (a,), lambda g: (np.where(clamped, 0.0, g / safe),))
    return _make(np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Node:
    a = constant(a)
    active = a.value > 0.0
    return _make(np.where(active, a.value, 0.0), (a,), lambda g: (g * active,))


def square(a) -> Node:
    a = constant(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


_ELEMENTWISE: dict[str, Callable[..., Node]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "ln1p": ln1p,
    "relu": relu,
}


def elementwise(kind: str, *args) -> Node:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# --- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, w, b=None) -> Node:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    x, w = constant(x), constant(w)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"linear: cannot multiply {xv.shape} by {wv.shape}")
    out = xv @ wv
    if b is None:
        return _make(out, (x, w), lambda g: (g @ wv.T, xv.T @ g))
    b = constant(b)
    if b.value.shape != (wv.shape[1],):
        raise ShapeError(f"linear: bias shape {b.value.shape} does not match output width {wv.shape[1]}")
    out = out + b.value
    return _make(out, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def transpose(a) -> Node:
    a = constant(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.value.shape}")
    return _make(a.value.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence, axis: int = 1) -> Node:
    parts = [constant(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(parts), backward)


def take_rows(a, rows) -> Node:
    a = constant(a)
    rows = np.asarray(rows, dtype=np.intp)
    av = a.value
    n = av.shape[0]

    def backward(g):
        full = np.zeros_like(av)
        np.add.at(full, rows, g)
        return (full,)

    out = av[rows]
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    return _make(out, (a,), backward)


# --- reductions --------------------------------------------------------------


def reduce(kind: str, x, axis: int | None = None) -> Node:
    x = constant(x)
    xv = x.value
    if axis is not None:
        if not 0 <= axis < xv.ndim:
            raise ShapeError(f"{kind}: axis {axis} out of range for rank {xv.ndim}")
        extent = xv.shape[axis]
    else:
        extent = xv.size
    if kind == "sum":
        return _make(np.asarray(xv.sum(axis=axis)), (x,),
                     lambda g: (np.broadcast_to(_expand(g, axis), xv.shape).copy(),))
    if extent == 0:
        raise EmptyReductionError(f"{kind} over an empty axis (shape {xv.shape}, axis {axis})")
    if kind == "mean":
        return _make(np.asarray(xv.mean(axis=axis)), (x,),
                     lambda g: (np.broadcast_to(_expand(g, axis) / extent, xv.shape).copy(),))
    if kind == "max":
        if axis is None:
            idx = np.unravel_index(np.argmax(xv), xv.shape)

            def backward(g):
                full = np.zeros_like(xv)
                full[idx] = g
                return (full,)

            return _make(np.asarray(xv[idx]), (x,), backward)
        arg = np.expand_dims(np.argmax(xv, axis=axis), axis)

        def backward(g):
            full = np.zeros_like(xv)
            np.put_along_axis(full, arg, _expand(g, axis), axis=axis)
            return (full,)

        return _make(np.take_along_axis(xv, arg, axis=axis).squeeze(axis), (x,), backward)
    raise ValueError(f"unknown reduction {kind!r}")


def _expand(g, axis):
    return g if axis is None else np.expand_dims(g, axis)


def sum(x, axis: int | None = None) -> Node:  # noqa: A001
    return reduce("sum", x, axis)


def mean(x, axis: int | None = None) -> Node:
    return reduce("mean", x, axis)


def max(x, axis: int | None = None) -> Node:  # noqa: A001
    return reduce("max", x, axis)


# --- fused softmax -----------------------------------------------------------


def masked_softmax_values(sv: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Forward of :func:`masked_softmax` on plain arrays (max-shifted)."""
    masked = np.where(mask, sv, -np.inf)
    row_max = masked.max(axis=1, initial=-np.inf)
    row_max[row_max == -np.inf] = 0.0
    e = np.exp(masked - row_max[:, None])
    denom = e.sum(axis=1)
    denom[denom == 0.0] = 1.0
    return e / denom[:, None]


def masked_softmax(scores, mask: np.ndarray) -> Node:
    """Row-wise softmax over entries where ``mask`` is true.

    Rows with no true entry come out as all zeros. Masked entries never
    influence the result, even if their scores are huge.
    """
    scores = constant(scores)
    sv = scores.value
    mask = np.asarray(mask, dtype=bool)
    if sv.ndim != 2 or mask.shape != sv.shape:
        raise ShapeError(f"masked_softmax: scores {sv.shape} vs mask {mask.shape}")
    w = masked_softmax_values(sv, mask)

    def backward(g):
        inner = (g * w).sum(axis=1, keepdims=True)
        return (w * (g - inner),)

    return _make(w, (scores,), backward)


def softmax(scores) -> Node:
    scores = constant(scores)
    return masked_softmax(scores, np.ones(scores.value.shape, dtype=bool))


# --- gradient checking -------------------------------------------------------


def grad_check(
    f: Callable,
    x,
    eps: float = 1e-5,
    n_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``x`` is an array (``f`` receives one Node) or a mapping of named arrays
    (``f`` receives a dict of Nodes). With ``n_coords`` set, that many
    coordinates are sampled uniformly instead of checking all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = isinstance(x, Mapping)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in x.items()} if named \
        else {"x": np.array(x, dtype=np.float64)}

    def evaluate(vals, tape):
        leaves = {k: tape.leaf(v) for k, v in vals.items()}
        out = f(leaves if named else leaves["x"])
        if not isinstance(out, Node):
            out = constant(out)
        if out.value.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.value.shape}")
        return out, leaves

    tape = Tape()
    out, leaves = evaluate(arrays, tape)
    if out.tape is tape:
        tape.backward(out)
    analytic = {k: tape.grad(n) for k, n in leaves.items()}

    coords = [(k, i) for k, v in arrays.items() for i in range(v.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in pick]

    worst = 0.0
    for key, i in coords:
        base = arrays[key]
        flat = base.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(evaluate(arrays, Tape())[0].value)
        flat[i] = orig - eps
        lo = float(evaluate(arrays, Tape())[0].value)
        flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        a = float(analytic[key].reshape(-1)[i])
        worst = builtins.max(worst, abs(a - fd) / builtins.max(1.0, abs(a)))
    return worst

