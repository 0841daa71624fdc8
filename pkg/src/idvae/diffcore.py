"""Dense double-precision tensors with a recorded tape for reverse-mode AD.

Operations are plain functions that dispatch on their arguments: given only
numpy arrays (or floats) they compute eagerly with numpy; given at least one
:class:`Var` they also record the primitive on that variable's :class:`Tape`.
Model code is written once against these functions and used both for fast
evaluation and for training.

No implicit broadcasting: elementwise binary operations need equal shapes,
except that either side may be a scalar.  Row/column broadcasts are spelled
out as products with vectors of ones (see :func:`add_rowvec`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# elementwise maps: name -> (f(x, a), df(x, y, a)); `a` is the map parameter

def _slope(x, a):
    # right-branch convention at exactly 0
    return np.where(x >= 0.0, 1.0, a)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


MAPS: dict[str, tuple[Callable, Callable]] = {
    "exp": (lambda x, a: np.exp(x), lambda x, y, a: y),
    "log": (lambda x, a: np.log(x), lambda x, y, a: 1.0 / x),
    "tanh": (lambda x, a: np.tanh(x), lambda x, y, a: 1.0 - y * y),
    "sigmoid": (lambda x, a: _sigmoid(x), lambda x, y, a: y * (1.0 - y)),
    "softplus": (lambda x, a: _softplus(x), lambda x, y, a: _sigmoid(x)),
    "square": (lambda x, a: x * x, lambda x, y, a: 2.0 * x),
    "sqrt": (lambda x, a: np.sqrt(x), lambda x, y, a: 0.5 / y),
    "reciprocal": (lambda x, a: 1.0 / x, lambda x, y, a: -y * y),
    "leaky_relu": (lambda x, a: x * _slope(x, a), lambda x, y, a: _slope(x, a)),
    # derivative of leaky_relu as a value; piecewise constant
    "leaky_slope": (lambda x, a: _slope(x, a), lambda x, y, a: np.zeros_like(x)),
    # h0(x) = max(a x, x)^2 and its derivative h0'(x) = 2 x slope(x)^2
    "sq_leaky_relu": (
        lambda x, a: (x * _slope(x, a)) ** 2,
        lambda x, y, a: 2.0 * x * _slope(x, a) ** 2,
    ),
    "sq_leaky_relu_grad": (
        lambda x, a: 2.0 * x * _slope(x, a) ** 2,
        lambda x, y, a: 2.0 * _slope(x, a) ** 2,
    ),
}


# ---------------------------------------------------------------------------
# primitive forward / backward rules

def _same_shape(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _unscalar(g, shape):
    # gradient flowing into a scalar operand of an elementwise op
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def _fwd_add(a, b, attrs):
    _same_shape("add", a, b)
    return a + b


def _bwd_add(g, args, out, attrs):
    a, b = args
    return _unscalar(g, a.shape), _unscalar(g, b.shape)


def _fwd_sub(a, b, attrs):
    _same_shape("sub", a, b)
    return a - b


def _bwd_sub(g, args, out, attrs):
    a, b = args
    return _unscalar(g, a.shape), _unscalar(-g, b.shape)


def _fwd_mul(a, b, attrs):
    _same_shape("mul", a, b)
    return a * b


def _bwd_mul(g, args, out, attrs):
    a, b = args
    return _unscalar(g * b, a.shape), _unscalar(g * a, b.shape)


def _fwd_matmul(a, b, attrs):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _bwd_matmul(g, args, out, attrs):
    a, b = args
    if b.ndim == 1:
        # matrix-vector (or vector-vector) product
        if a.ndim == 1:
            return g * b, g * a
        return np.outer(g, b), a.T @ g
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    return g @ b.T, a.T @ g


def _fwd_transpose(a, attrs):
    return a.T


def _bwd_transpose(g, args, out, attrs):
    return (g.T,)


def _fwd_sum(a, attrs):
    return np.asarray(a.sum(axis=attrs.get("axis")))


def _bwd_sum(g, args, out, attrs):
    (a,) = args
    axis = attrs.get("axis")
    if axis is None:
        return (np.full(a.shape, float(g)),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _fwd_map(a, attrs):
    f, _ = MAPS[attrs["fn"]]
    return f(a, attrs.get("param"))


def _bwd_map(g, args, out, attrs):
    (a,) = args
    _, df = MAPS[attrs["fn"]]
    return (g * df(a, out, attrs.get("param")),)


def _fwd_concat(*arrays, attrs):
    axis = attrs["axis"]
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None


def _bwd_concat(g, args, out, attrs):
    axis = attrs["axis"]
    edges = np.cumsum([a.shape[axis] for a in args])[:-1]
    return tuple(np.split(g, edges, axis=axis))


def _fwd_slice(a, attrs):
    return a[attrs["key"]]


def _bwd_slice(g, args, out, attrs):
    (a,) = args
    full = np.zeros(a.shape)
    full[attrs["key"]] = g
    return (full,)


def _fwd_reshape(a, attrs):
    try:
        return a.reshape(attrs["shape"])
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None


def _bwd_reshape(g, args, out, attrs):
    return (g.reshape(args[0].shape),)


_RULES = {
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "matmul": (_fwd_matmul, _bwd_matmul),
    "transpose": (_fwd_transpose, _bwd_transpose),
    "sum": (_fwd_sum, _bwd_sum),
    "map": (_fwd_map, _bwd_map),
    "concat": (None, _bwd_concat),
    "slice": (_fwd_slice, _bwd_slice),
    "reshape": (_fwd_reshape, _bwd_reshape),
}


def _forward(op, values, attrs):
    if op == "concat":
        return _fwd_concat(*values, attrs=attrs)
    return _RULES[op][0](*values, attrs)


# ---------------------------------------------------------------------------
# tape

@dataclass
class Node:
    op: str
    args: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    name: str | None = None


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so every node's arguments
    precede it.  ``input`` nodes carry a name and can be rebound by
    :func:`evaluate`; ``const`` nodes are fixed.
    """

    nodes: list[Node] = field(default_factory=list)
    inputs: dict[str, int] = field(default_factory=dict)

    def input(self, name: str, value) -> "Var":
        if name in self.inputs:
            raise TapeError(f"input {name!r} already bound on this tape")
        idx = self._push(Node("input", (), {}, _as_array(value), name))
        self.inputs[name] = idx
        return Var(self, idx)

    def constant(self, value) -> "Var":
        return Var(self, self._push(Node("const", (), {}, _as_array(value))))

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def record(self, op: str, args: tuple["Var", ...], attrs: dict) -> "Var":
        idx = len(self.nodes)
        try:
            value = _forward(op, [a.value for a in args], attrs)
        except ShapeError as exc:
            raise ShapeError(f"operation #{idx} ({op}): {exc}") from None
        return Var(self, self._push(Node(op, tuple(a.index for a in args), attrs, value)))

    def __len__(self):
        return len(self.nodes)


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

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
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _as_array(x)


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = a.tape
    return tape


def _apply(op: str, args, attrs=None):
    attrs = attrs or {}
    tape = _tape_of(args)
    if tape is None:
        return _forward(op, [_as_array(a) for a in args], attrs)
    vs = tuple(a if isinstance(a, Var) else tape.constant(a) for a in args)
    return tape.record(op, vs, attrs)


# ---------------------------------------------------------------------------
# public operations

def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def matmul(a, b):
    return _apply("matmul", (a, b))


def transpose(a):
    return _apply("transpose", (a,))


def sum_(a, axis=None):
    return _apply("sum", (a,), {"axis": axis})


def concat(arrays, axis=-1):
    return _apply("concat", tuple(arrays), {"axis": axis})


def slice_(a, key):
    return _apply("slice", (a,), {"key": key})


def reshape(a, shape):
    return _apply("reshape", (a,), {"shape": tuple(shape)})


def elementwise(fn: str, a, param=None):
    if fn not in MAPS:
        raise KeyError(f"unknown elementwise map {fn!r}")
    return _apply("map", (a,), {"fn": fn, "param": param})


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def tanh(a):
    return elementwise("tanh", a)


def sigmoid(a):
    return elementwise("sigmoid", a)


def softplus(a):
    return elementwise("softplus", a)


def square(a):
    return elementwise("square", a)


def sqrt(a):
    return elementwise("sqrt", a)


def reciprocal(a):
    return elementwise("reciprocal", a)


def leaky_relu(a, slope=0.2):
    return elementwise("leaky_relu", a, slope)


def stop_gradient(a):
    """Value of ``a`` as a constant (no gradient flows through)."""
    return value_of(a).copy()


def ones(*shape):
    return np.ones(shape)


def add_rowvec(x, b):
    """x (n, d) plus the vector b (d,) added to every row."""
    n = value_of(x).shape[0]
    return add(x, matmul(np.ones((n, 1)), reshape(b, (1, -1))))


def row_sum(x):
    """Sum across columns of an (n, d) array -> (n,)."""
    return sum_(x, axis=1)


def tile_col(v, d):
    """(n,) vector repeated across d columns -> (n, d)."""
    return matmul(reshape(v, (-1, 1)), np.ones((1, d)))


def logsumexp_rows(x):
    """Row-wise log-sum-exp of an (n, k) array -> (n,)."""
    xv = value_of(x)
    m = xv.max(axis=1)
    k = xv.shape[1]
    shifted = sub(x, tile_col(m, k))
    return add(log(row_sum(exp(shifted))), m)


# ---------------------------------------------------------------------------
# evaluate / gradient

def evaluate(tape: Tape, inputs: Mapping[str, np.ndarray] | None = None, output: Var | None = None):
    """Re-run the tape forward, rebinding named inputs; returns the output value.

    Intermediate values are refreshed in place so a following
    :func:`gradient` call differentiates at the new point.
    """
    inputs = dict(inputs or {})
    unknown = set(inputs) - set(tape.inputs)
    if unknown:
        raise TapeError(f"unknown inputs: {sorted(unknown)}")
    for idx, node in enumerate(tape.nodes):
        if node.op == "input":
            if node.name in inputs:
                node.value = _as_array(inputs[node.name])
            continue
        if node.op == "const":
            continue
        vals = [tape.nodes[j].value for j in node.args]
        try:
            node.value = _forward(node.op, vals, node.attrs)
        except ShapeError as exc:
            raise ShapeError(f"operation #{idx} ({node.op}): {exc}") from None
    out = tape.nodes[output.index if output is not None else -1]
    return out.value


def gradient(tape: Tape, output: Var, wrt=None) -> dict[str, np.ndarray]:
    """d output / d input for each named input in ``wrt`` (default: all)."""
    if output.tape is not tape:
        raise TapeError("output does not belong to this tape")
    if output.value.size != 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
    names = list(tape.inputs) if wrt is None else list(wrt)
    for name in names:
        if name not in tape.inputs:
            raise TapeError(f"input {name!r} is not bound on this tape")

    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * (output.index + 1)
    grads[output.index] = np.ones_like(output.value)
    for idx in range(output.index, -1, -1):
        g = grads[idx]
        node = nodes[idx]
        if g is None or node.op in ("input", "const"):
            continue
        args = [nodes[j].value for j in node.args]
        parts = _RULES[node.op][1](g, args, node.value, node.attrs)
        for j, part in zip(node.args, parts):
            if nodes[j].op == "const":
                continue
            grads[j] = part if grads[j] is None else grads[j] + part
    out = {}
    for name in names:
        idx = tape.inputs[name]
        g = grads[idx] if idx < len(grads) else None
        out[name] = np.zeros_like(nodes[idx].value) if g is None else np.asarray(g, dtype=np.float64)
    return out


def value_and_grad(fn: Callable, params: Mapping[str, np.ndarray], wrt=None):
    """Bind ``params`` on a fresh tape, call ``fn(bound)`` and differentiate."""
    tape = Tape()
    bound = {k: tape.input(k, v) for k, v in params.items()}
    out = fn(bound)
    if not isinstance(out, Var):
        return float(out), {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}
    return float(out.value), gradient(tape, out, wrt)


def check_gradient(f: Callable, x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps an array (or a Var) to a scalar using the operations of this
    module.  The error is ``max|g - fd| / max(max|g|, max|fd|, 1)``, relative
    for large gradients and absolute for small ones.
    """
    x = _as_array(x)
    tape = Tape()
    out = f(tape.input("x", x))
    if isinstance(out, Var):
        g = gradient(tape, out, ["x"])["x"]
    else:
        g = np.zeros_like(x)
    fd = np.zeros_like(x)
    flat = fd.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        fp = float(value_of(f(x + e)))
        fm = float(value_of(f(x - e)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near x (coordinate {i})")
        flat[i] = (fp - fm) / (2.0 * h)
    scale = max(np.abs(g).max(initial=0.0), np.abs(fd).max(initial=0.0), 1.0)
    return float(np.abs(g - fd).max() / scale)
