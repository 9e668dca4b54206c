"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

A :class:`Tape` records every operation eagerly: the forward value is computed
when the node is appended, and :meth:`Tape.backward` replays the record in
reverse node-id order. Values are plain ``numpy`` arrays of shape
``(rows, cols)``; scalars are ``(1, 1)``.

Operations are looked up in :data:`OPS`, a registry mapping an op kind to a
``(forward, backward)`` pair. Tests swap entries in the registry to check that
:func:`grad_check` catches a broken rule.

Example::

    tape = Tape()
    w = tape.parameter([[3.0]])
    loss = w.square().sum()
    grads = tape.backward(loss)
    grads[w]  # array([[6.]])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "AutodiffError",
    "GradCheckReport",
    "OPS",
    "Tape",
    "Var",
    "as_tensor",
    "grad_check",
]


class AutodiffError(ValueError):
    """Raised on shape mismatches, domain errors and bad tape usage."""


def as_tensor(value) -> np.ndarray:
    """Convert external input to a finite, C-contiguous 2-D float64 array."""
    arr = np.array(value, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise AutodiffError(f"tensors are 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise AutodiffError("tensor contains NaN or Inf")
    return np.ascontiguousarray(arr)


# --------------------------------------------------------------------------
# op registry: forward(values, **attrs) -> (out, cache)
#              backward(grad_out, values, out, cache, needs, **attrs) -> tuple of input grads
# ``needs[k]`` is False when input k cannot reach a parameter; rules may return
# None for such inputs.
# --------------------------------------------------------------------------


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise AutodiffError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _fwd_add(vals):
    a, b = vals
    _same_shape("add", a, b)
    return a + b, None


def _bwd_add(g, vals, out, cache, needs):
    return g, g


def _fwd_sub(vals):
    a, b = vals
    _same_shape("sub", a, b)
    return a - b, None


def _bwd_sub(g, vals, out, cache, needs):
    return g, -g


def _fwd_mul(vals):
    a, b = vals
    _same_shape("mul", a, b)
    return a * b, None


def _bwd_mul(g, vals, out, cache, needs):
    a, b = vals
    return (g * b if needs[0] else None), (g * a if needs[1] else None)


def _fwd_matmul(vals):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return a @ b, None


def _bwd_matmul(g, vals, out, cache, needs):
    a, b = vals
    return (g @ b.T if needs[0] else None), (a.T @ g if needs[1] else None)


def _fwd_leaky_relu(vals, slope=0.01):
    (a,) = vals
    scale = (a > 0) * (1.0 - slope) + slope
    return a * scale, scale


def _bwd_leaky_relu(g, vals, out, scale, needs, slope=0.01):
    return (g * scale,)


def _fwd_tanh(vals):
    (a,) = vals
    return np.tanh(a), None


def _bwd_tanh(g, vals, out, cache, needs):
    return (g * (1.0 - out * out),)


def _fwd_exp(vals):
    (a,) = vals
    return np.exp(a), None


def _bwd_exp(g, vals, out, cache, needs):
    return (g * out,)


def _fwd_log(vals):
    (a,) = vals
    if np.any(a <= 0):
        raise AutodiffError("log: non-positive entry")
    return np.log(a), None


def _bwd_log(g, vals, out, cache, needs):
    return (g / vals[0],)


def _fwd_square(vals):
    (a,) = vals
    return a * a, None


def _bwd_square(g, vals, out, cache, needs):
    return (2.0 * g * vals[0],)


def _fwd_abs(vals):
    (a,) = vals
    return np.abs(a), None


def _bwd_abs(g, vals, out, cache, needs):
    # subgradient 0 at 0
    return (g * np.sign(vals[0]),)


def _fwd_sum(vals):
    (a,) = vals
    return np.array([[a.sum()]]), None


def _bwd_sum(g, vals, out, cache, needs):
    return (np.full(vals[0].shape, g[0, 0]),)


def _fwd_mean(vals):
    (a,) = vals
    return np.array([[a.mean()]]), None


def _bwd_mean(g, vals, out, cache, needs):
    a = vals[0]
    return (np.full(a.shape, g[0, 0] / a.size),)


def _fwd_scalar_mul(vals, scalar=1.0):
    (a,) = vals
    return a * scalar, None


def _bwd_scalar_mul(g, vals, out, cache, needs, scalar=1.0):
    return (g * scalar,)


def _fwd_concat_cols(vals):
    rows = {v.shape[0] for v in vals}
    if len(rows) != 1:
        shapes = " vs ".join(str(v.shape) for v in vals)
        raise AutodiffError(f"concat-cols: shape mismatch {shapes}")
    return np.concatenate(vals, axis=1), np.cumsum([0] + [v.shape[1] for v in vals])


def _bwd_concat_cols(g, vals, out, bounds, needs):
    return tuple(g[:, bounds[k] : bounds[k + 1]] if needs[k] else None for k in range(len(vals)))


def _fwd_slice_cols(vals, start=0, stop=None):
    (a,) = vals
    stop = a.shape[1] if stop is None else stop
    if not 0 <= start < stop <= a.shape[1]:
        raise AutodiffError(f"slice-cols: [{start}:{stop}] out of range for {a.shape}")
    return a[:, start:stop].copy(), None


def _bwd_slice_cols(g, vals, out, cache, needs, start=0, stop=None):
    a = vals[0]
    stop = a.shape[1] if stop is None else stop
    ga = np.zeros_like(a)
    ga[:, start:stop] = g
    return (ga,)


def _fwd_broadcast_row(vals, rows=1):
    (a,) = vals
    if a.shape[0] != 1:
        raise AutodiffError(f"broadcast-row: expected 1 row, got shape {a.shape}")
    return np.broadcast_to(a, (rows, a.shape[1])), None


def _bwd_broadcast_row(g, vals, out, cache, needs, rows=1):
    return (g.sum(axis=0, keepdims=True),)


OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "matmul": (_fwd_matmul, _bwd_matmul),
    "leaky_relu": (_fwd_leaky_relu, _bwd_leaky_relu),
    "tanh": (_fwd_tanh, _bwd_tanh),
    "exp": (_fwd_exp, _bwd_exp),
    "log": (_fwd_log, _bwd_log),
    "square": (_fwd_square, _bwd_square),
    "abs": (_fwd_abs, _bwd_abs),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "scalar_mul": (_fwd_scalar_mul, _bwd_scalar_mul),
    "concat_cols": (_fwd_concat_cols, _bwd_concat_cols),
    "slice_cols": (_fwd_slice_cols, _bwd_slice_cols),
    "broadcast_row": (_fwd_broadcast_row, _bwd_broadcast_row),
}


_NONSMOOTH = ("leaky_relu", "abs")


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    cache: object = None
    attrs: dict = field(default_factory=dict)
    needs_grad: bool = False


class _GradMap(dict):
    """Gradient map that yields zeros for nodes the root does not reach."""

    def __init__(self, tape: "Tape"):
        super().__init__()
        self._tape = tape

    def __missing__(self, key):
        if isinstance(key, Var):
            return self[key.id]
        return np.zeros_like(self._tape.nodes[key].value)


class Tape:
    """Eager computation record. Not thread-safe; use one tape per thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: set[int] = set()

    def _append(self, kind, inputs, value, cache=None, attrs=None, needs_grad=False) -> "Var":
        self.nodes.append(Node(kind, tuple(inputs), value, cache, attrs or {}, needs_grad))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value, validate: bool = True) -> "Var":
        arr = as_tensor(value) if validate else value
        return self._append("const", (), arr)

    def parameter(self, value, validate: bool = True) -> "Var":
        var = self._append("param", (), as_tensor(value) if validate else value, needs_grad=True)
        self.param_ids.add(var.id)
        return var

    def op(self, kind: str, inputs, **attrs) -> "Var":
        """Append ``kind`` applied to ``inputs`` (Vars or node ids)."""
        try:
            forward, _ = OPS[kind]
        except KeyError:
            raise AutodiffError(f"unknown op kind {kind!r}") from None
        ids = tuple(i.id if isinstance(i, Var) else int(i) for i in inputs)
        n = len(self.nodes)
        for i in ids:
            if not 0 <= i < n:
                raise AutodiffError(f"{kind}: input id {i} not on tape")
        out, cache = forward([self.nodes[i].value for i in ids], **attrs)
        needs = any(self.nodes[i].needs_grad for i in ids)
        return self._append(kind, ids, out, cache, attrs, needs)

    def value(self, node) -> np.ndarray:
        return self.nodes[node.id if isinstance(node, Var) else node].value

    def kink_distance(self) -> float:
        """Smallest ``|input|`` over every non-smooth op (``leaky_relu``, ``abs``).

        Finite differences are only meaningful when this exceeds the step.
        """
        dist = np.inf
        for node in self.nodes:
            if node.kind in _NONSMOOTH:
                dist = min(dist, float(np.min(np.abs(self.nodes[node.inputs[0]].value))))
        return dist

    def backward(self, root) -> dict:
        """Gradients of the scalar ``root`` w.r.t. every node on the tape."""
        rid = root.id if isinstance(root, Var) else int(root)
        if self.nodes[rid].value.shape != (1, 1):
            raise AutodiffError(
                f"backward: root must be 1x1, got {self.nodes[rid].value.shape}"
            )
        grads = _GradMap(self)
        grads[rid] = np.ones((1, 1))
        for nid in range(rid, -1, -1):
            g = dict.get(grads, nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if not node.inputs or not node.needs_grad:
                continue
            _, backward = OPS[node.kind]
            inputs = [self.nodes[i] for i in node.inputs]
            needs = tuple(n.needs_grad for n in inputs)
            in_grads = backward(g, [n.value for n in inputs], node.value, node.cache, needs, **node.attrs)
            for i, gi, need in zip(node.inputs, in_grads, needs):
                if not need:
                    continue
                prev = dict.get(grads, i)
                grads[i] = gi if prev is None else prev + gi
        return grads


class Var:
    """Handle to a tape node with operator sugar."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, nid: int):
        self.tape = tape
        self.id = nid

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __hash__(self):
        return hash(self.id)

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.id == self.id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.constant(np.broadcast_to(as_tensor(other), self.shape))

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.op("add", (self, self._lift(other)))
        other = self._lift(other)
        if other.shape[0] == 1 and self.shape[0] != 1:
            other = other.broadcast_row(self.shape[0])
        return self.tape.op("add", (self, other))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        if other.shape[0] == 1 and self.shape[0] != 1:
            other = other.broadcast_row(self.shape[0])
        return self.tape.op("sub", (self, other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.op("scalar_mul", (self,), scalar=float(other))
        return self.tape.op("mul", (self, self._lift(other)))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return self.tape.op("matmul", (self, other))

    def leaky_relu(self, slope: float = 0.01):
        return self.tape.op("leaky_relu", (self,), slope=float(slope))

    def tanh(self):
        return self.tape.op("tanh", (self,))

    def exp(self):
        return self.tape.op("exp", (self,))

    def log(self):
        return self.tape.op("log", (self,))

    def square(self):
        return self.tape.op("square", (self,))

    def abs(self):
        return self.tape.op("abs", (self,))

    def sum(self):
        return self.tape.op("sum", (self,))

    def mean(self):
        return self.tape.op("mean", (self,))

    def broadcast_row(self, rows: int):
        return self.tape.op("broadcast_row", (self,), rows=int(rows))

    def slice_cols(self, start: int, stop: int):
        return self.tape.op("slice_cols", (self,), start=int(start), stop=int(stop))

    def concat(self, *others):
        return self.tape.op("concat_cols", (self, *others))


def concat_cols(parts):
    parts = list(parts)
    return parts[0].tape.op("concat_cols", parts)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple[str, tuple[int, int]] | None = None


def grad_check(
    build: Callable[[Tape, dict], Var],
    params: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients with central differences, entry by entry.

    ``build(tape, vars)`` receives a fresh tape and a dict of parameter Vars
    and returns a scalar loss Var. Relative error for one entry is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``.
    """
    params = {k: as_tensor(v).copy() for k, v in params.items()}

    def evaluate(values):
        tape = Tape()
        vars_ = {k: tape.parameter(v) for k, v in values.items()}
        root = build(tape, vars_)
        loss = float(root.value[0, 0])
        if not np.isfinite(loss):
            raise AutodiffError("grad_check: non-finite loss")
        return tape, vars_, root, loss

    tape, vars_, root, _ = evaluate(params)
    grads = tape.backward(root)

    worst_err, worst = 0.0, None
    for name, value in params.items():
        analytic = grads[vars_[name]]
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            h = eps * max(1.0, abs(orig))
            value[idx] = orig + h
            f_plus = evaluate(params)[3]
            value[idx] = orig - h
            f_minus = evaluate(params)[3]
            value[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = analytic[idx]
            err = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            if err > worst_err:
                worst_err, worst = err, (name, idx)
    return GradCheckReport(float(worst_err), bool(worst_err <= tolerance), worst)
