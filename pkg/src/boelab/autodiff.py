"""Reverse-mode differentiation on an append-only tape.

A :class:`Tape` is created for one computation (a decode step, a training
batch), records every operation applied to taped tensors, and is discarded
after :func:`backward`. Gradients flowing backward may be *row-sparse*: when
only a subset of rows of a 2-D value carries gradient (as after
:func:`row_detach`), downstream backward rules only touch those rows. This is
what makes the backward cost of attention scale with the number of active
query rows rather than with the sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .exceptions import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "RowMask",
    "BackwardStats",
    "record",
    "backward",
    "register_op",
    "matmul",
    "add",
    "mul",
    "scale",
    "softmax_rows",
    "log_softmax_rows",
    "log",
    "layer_norm_rows",
    "relu",
    "gather_rows",
    "sum",
    "row_select",
    "transpose",
    "row_detach",
    "attention",
    "grad_check",
]


class Tensor:
    """Dense array, optionally linked to a tape node.

    ``tape is None`` means the value is a constant: it is never differentiated.
    """

    __slots__ = ("data", "tape", "index", "requires_grad")

    def __init__(self, data, tape=None, index=None, requires_grad=False):
        self.data = data
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tape_id(self):
        return self.index

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.data.dtype))

    def __repr__(self):
        where = f"node={self.index}" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {where})"


@dataclass(frozen=True)
class RowMask:
    """Set of active row indices (token positions) of an ``length``-row value."""

    active: np.ndarray
    length: int

    def __init__(self, active: Iterable[int], length: int):
        idx = np.unique(np.asarray(list(active) if not isinstance(active, np.ndarray) else active, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= length):
            raise ContractError(f"RowMask index out of range for length {length}: {idx.tolist()}")
        object.__setattr__(self, "active", idx)
        object.__setattr__(self, "length", int(length))

    @classmethod
    def all(cls, length: int) -> "RowMask":
        return cls(np.arange(length), length)

    def __len__(self):
        return int(self.active.size)

    def __contains__(self, i):
        return bool(np.any(self.active == i))


@dataclass
class BackwardStats:
    nodes: int = 0
    rows: int = 0
    # rows visited per op kind
    by_op: dict = field(default_factory=dict)

    def op_rows(self, kind: str) -> int:
        return int(self.by_op.get(kind, 0))


class _Grad:
    """Gradient for one value; ``rows is None`` means dense, else compact rows."""

    __slots__ = ("rows", "values")

    def __init__(self, rows, values):
        self.rows = rows
        self.values = values

    def count(self, shape):
        if self.rows is not None:
            return int(self.rows.size)
        return int(shape[0]) if len(shape) == 2 else 1

    def dense(self, shape):
        if self.rows is None:
            return self.values
        out = np.zeros(shape, dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


def _sparse(rows, values, n):
    """Build a row-sparse gradient, collapsing to dense when it covers every row."""
    if rows is None:
        return _Grad(None, values)
    if rows.size == 0:
        return None
    if rows.size == n:
        if np.array_equal(rows, np.arange(n)):
            return _Grad(None, values)
        out = np.empty_like(values)
        out[rows] = values
        return _Grad(None, out)
    return _Grad(rows, values)


def _accumulate(a, b, shape):
    if a.rows is None and b.rows is None:
        return _Grad(None, a.values + b.values)
    if a.rows is None or b.rows is None:
        dense, part = (a, b) if a.rows is None else (b, a)
        out = dense.values.copy()
        out[part.rows] += part.values
        return _Grad(None, out)
    if np.array_equal(a.rows, b.rows):
        return _Grad(a.rows, a.values + b.values)
    rows = np.union1d(a.rows, b.rows)
    buf = np.zeros((rows.size,) + a.values.shape[1:], dtype=a.values.dtype)
    buf[np.searchsorted(rows, a.rows)] += a.values
    buf[np.searchsorted(rows, b.rows)] += b.values
    return _sparse(rows, buf, shape[0])


def _take(x, rows):
    return x if rows is None else x[rows]


# ---------------------------------------------------------------------------
# op registry


class Op:
    """Forward/backward rule pair. Subclasses are registered by name."""

    name = ""

    def check(self, xs, attrs):
        pass

    def forward(self, xs, attrs):
        raise NotImplementedError

    def backward(self, g, xs, out, saved, attrs, needs):
        raise NotImplementedError

    def branch(self, xs):
        """Which smooth piece each input element falls in; ``None`` if the op is smooth."""
        return None


_OPS: dict[str, Op] = {}


def register_op(name: str):
    """Class decorator adding an :class:`Op` subclass to the registry."""

    def deco(cls):
        inst = cls()
        inst.name = name
        _OPS[name] = inst
        return cls

    return deco


def _shape_error(op, *arrays):
    shapes = ", ".join(str(a.shape) for a in arrays)
    return ShapeError(f"{op}: incompatible shapes {shapes}")


def _check_broadcast(op, a, b):
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return True
    raise _shape_error(op, a, b)


@register_op("matmul")
class _MatMul(Op):
    def check(self, xs, attrs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _shape_error("matmul", a, b)

    def forward(self, xs, attrs):
        a, b = xs
        return a @ b, None

    def backward(self, g, xs, out, saved, attrs, needs):
        a, b = xs
        da = db = None
        if needs[0]:
            da = _Grad(g.rows, g.values @ b.T)
        if needs[1]:
            db = _Grad(None, _take(a, g.rows).T @ g.values)
        return da, db


@register_op("add")
class _Add(Op):
    def check(self, xs, attrs):
        attrs["bias"] = _check_broadcast("add", *xs)

    def forward(self, xs, attrs):
        return xs[0] + xs[1], None

    def backward(self, g, xs, out, saved, attrs, needs):
        db = g if needs[1] else None
        if needs[1] and attrs["bias"]:
            db = _Grad(None, g.values.sum(axis=0))
        return (g if needs[0] else None), db


@register_op("mul")
class _Mul(Op):
    def check(self, xs, attrs):
        attrs["bias"] = _check_broadcast("mul", *xs)

    def forward(self, xs, attrs):
        return xs[0] * xs[1], None

    def backward(self, g, xs, out, saved, attrs, needs):
        a, b = xs
        da = db = None
        if attrs["bias"]:
            if needs[0]:
                da = _Grad(g.rows, g.values * b)
            if needs[1]:
                db = _Grad(None, (g.values * _take(a, g.rows)).sum(axis=0))
        else:
            if needs[0]:
                da = _Grad(g.rows, g.values * _take(b, g.rows))
            if needs[1]:
                db = _Grad(g.rows, g.values * _take(a, g.rows))
        return da, db


@register_op("scale")
class _Scale(Op):
    def forward(self, xs, attrs):
        return (xs[0] * attrs["c"]).astype(xs[0].dtype, copy=False), None

    def backward(self, g, xs, out, saved, attrs, needs):
        return (_Grad(g.rows, (g.values * attrs["c"]).astype(g.values.dtype, copy=False)),)


@register_op("softmax_rows")
class _Softmax(Op):
    def check(self, xs, attrs):
        if xs[0].ndim != 2:
            raise _shape_error("softmax_rows", xs[0])

    def forward(self, xs, attrs):
        z = xs[0] - xs[0].max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True), None

    def backward(self, g, xs, out, saved, attrs, needs):
        y = _take(out, g.rows)
        gv = g.values
        return (_Grad(g.rows, y * (gv - (gv * y).sum(axis=1, keepdims=True))),)


@register_op("log_softmax_rows")
class _LogSoftmax(Op):
    def check(self, xs, attrs):
        if xs[0].ndim != 2:
            raise _shape_error("log_softmax_rows", xs[0])

    def forward(self, xs, attrs):
        z = xs[0] - xs[0].max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        out = z - lse
        return out, np.exp(out)

    def backward(self, g, xs, out, saved, attrs, needs):
        y = _take(saved, g.rows)
        gv = g.values
        return (_Grad(g.rows, gv - y * gv.sum(axis=1, keepdims=True)),)


@register_op("log")
class _Log(Op):
    def check(self, xs, attrs):
        if not np.all(xs[0] > 0):
            raise NumericError("log: input has non-positive entries")

    def forward(self, xs, attrs):
        return np.log(xs[0]), None

    def backward(self, g, xs, out, saved, attrs, needs):
        return (_Grad(g.rows, g.values / _take(xs[0], g.rows)),)


@register_op("layer_norm_rows")
class _LayerNorm(Op):
    def check(self, xs, attrs):
        if xs[0].ndim != 2:
            raise _shape_error("layer_norm_rows", xs[0])
        attrs.setdefault("eps", 1e-5)

    def forward(self, xs, attrs):
        x = xs[0]
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = (1.0 / np.sqrt(var + attrs["eps"])).astype(x.dtype, copy=False)
        xhat = xc * inv
        return xhat, inv

    def backward(self, g, xs, out, saved, attrs, needs):
        xhat = _take(out, g.rows)
        inv = _take(saved, g.rows)
        gv = g.values
        n = gv.shape[1]
        dx = (inv / n) * (n * gv - gv.sum(axis=1, keepdims=True) - xhat * (gv * xhat).sum(axis=1, keepdims=True))
        return (_Grad(g.rows, dx.astype(gv.dtype, copy=False)),)


@register_op("relu")
class _Relu(Op):
    def forward(self, xs, attrs):
        return np.maximum(xs[0], 0), None

    def backward(self, g, xs, out, saved, attrs, needs):
        return (_Grad(g.rows, g.values * (_take(xs[0], g.rows) > 0)),)

    def branch(self, xs):
        return xs[0] > 0


@register_op("gather_rows")
class _Gather(Op):
    def check(self, xs, attrs):
        table = xs[0]
        idx = np.asarray(attrs["index"], dtype=np.int64)
        if table.ndim != 2 or idx.ndim != 1:
            raise _shape_error("gather_rows", table, idx)
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise ContractError(f"gather_rows: index out of range for table of {table.shape[0]} rows")
        attrs["index"] = idx

    def forward(self, xs, attrs):
        return xs[0][attrs["index"]], None

    def backward(self, g, xs, out, saved, attrs, needs):
        dt = np.zeros_like(xs[0])
        np.add.at(dt, _take(attrs["index"], g.rows), g.values)
        return (_Grad(None, dt),)


@register_op("sum")
class _Sum(Op):
    def forward(self, xs, attrs):
        return np.asarray(xs[0].sum(), dtype=xs[0].dtype), None

    def backward(self, g, xs, out, saved, attrs, needs):
        return (_Grad(None, np.full(xs[0].shape, g.values, dtype=xs[0].dtype)),)


@register_op("row_select")
class _RowSelect(Op):
    def check(self, xs, attrs):
        a = xs[0]
        rows = np.asarray(attrs["rows"], dtype=np.int64)
        if a.ndim != 2 or rows.ndim != 1:
            raise _shape_error("row_select", a, rows)
        if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
            raise ContractError(f"row_select: row index out of range for {a.shape[0]} rows")
        if np.unique(rows).size != rows.size:
            raise ContractError("row_select: duplicate rows")
        attrs["rows"] = rows

    def forward(self, xs, attrs):
        return xs[0][attrs["rows"]], None

    def backward(self, g, xs, out, saved, attrs, needs):
        return (_sparse(_take(attrs["rows"], g.rows), g.values, xs[0].shape[0]),)


@register_op("transpose")
class _Transpose(Op):
    def check(self, xs, attrs):
        if xs[0].ndim != 2:
            raise _shape_error("transpose", xs[0])

    def forward(self, xs, attrs):
        return xs[0].T, None

    def backward(self, g, xs, out, saved, attrs, needs):
        return (_Grad(None, g.dense(out.shape).T),)


@register_op("row_detach")
class _RowDetach(Op):
    def check(self, xs, attrs):
        a = xs[0]
        mask = attrs["mask"]
        if a.ndim != 2:
            raise _shape_error("row_detach", a)
        if mask.length != a.shape[0]:
            raise ContractError(f"row_detach: mask length {mask.length} != rows {a.shape[0]}")

    def forward(self, xs, attrs):
        return xs[0], None

    def backward(self, g, xs, out, saved, attrs, needs):
        active = attrs["mask"].active
        n = xs[0].shape[0]
        if g.rows is None:
            if active.size == n:
                return (g,)
            return (_sparse(active, g.values[active], n),)
        keep = np.isin(g.rows, active)
        return (_sparse(g.rows[keep], g.values[keep], n),)


@register_op("attention")
class _Attention(Op):
    """Multi-head scaled dot-product attention over rows of ``q``, ``k``, ``v``.

    ``heads`` splits the width into equal slices; ``bias`` is an optional
    constant ``(n, n)`` additive score mask. The backward only touches the
    query rows present in the incoming gradient, costing O(rows * n * d).
    """

    def check(self, xs, attrs):
        q, k, v = xs
        heads = attrs.get("heads", 1)
        if q.ndim != 2 or k.shape != q.shape or v.shape != q.shape:
            raise _shape_error("attention", q, k, v)
        if heads < 1 or q.shape[1] % heads:
            raise ContractError(f"attention: width {q.shape[1]} not divisible by heads={heads}")
        bias = attrs.get("bias")
        if bias is not None and bias.shape != (q.shape[0], q.shape[0]):
            raise _shape_error("attention", q, bias)
        attrs["heads"] = heads
        attrs["bias"] = bias

    @staticmethod
    def _split(x, heads):
        n, d = x.shape
        return x.reshape(n, heads, d // heads).transpose(1, 0, 2)

    def forward(self, xs, attrs):
        h = attrs["heads"]
        q, k, v = (self._split(x, h) for x in xs)
        scale = np.asarray(1.0 / np.sqrt(q.shape[2]), dtype=xs[0].dtype)
        s = (q @ k.transpose(0, 2, 1)) * scale
        if attrs["bias"] is not None:
            s = s + attrs["bias"]
        s = s - s.max(axis=2, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=2, keepdims=True)
        z = p @ v
        n, d = xs[0].shape
        return z.transpose(1, 0, 2).reshape(n, d), p

    def backward(self, g, xs, out, saved, attrs, needs):
        h = attrs["heads"]
        n, d = xs[0].shape
        q, k, v = (self._split(x, h) for x in xs)
        rows = g.rows
        p = saved if rows is None else saved[:, rows]
        dz = g.values.reshape(-1, h, d // h).transpose(1, 0, 2)
        dp = dz @ v.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True))
        ds *= np.asarray(1.0 / np.sqrt(d // h), dtype=ds.dtype)
        merge = lambda a: a.transpose(1, 0, 2).reshape(a.shape[1], d)  # noqa: E731
        dq = _sparse(rows, merge(ds @ k), n) if needs[0] else None
        q_r = q if rows is None else q[:, rows]
        dk = _Grad(None, merge(ds.transpose(0, 2, 1) @ q_r)) if needs[1] else None
        dv = _Grad(None, merge(p.transpose(0, 2, 1) @ dz)) if needs[2] else None
        return dq, dk, dv


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("op", "inputs", "attrs", "saved", "out", "needs")

    def __init__(self, op, inputs, attrs, saved, out):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.saved = saved
        self.out = out
        self.needs = tuple(t.requires_grad for t in inputs)


class Tape:
    """Append-only record of operations; one per decode step or batch."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[_Node] = []
        self.forward_rows = 0
        self.last_backward: BackwardStats | None = None
        # branch patterns of piecewise ops, in recording order
        self.branches: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def const(self, data) -> Tensor:
        return Tensor(np.asarray(data, dtype=self.dtype))

    def leaf(self, data, requires_grad=True) -> Tensor:
        arr = np.array(data, dtype=self.dtype)
        if not requires_grad:
            return Tensor(arr)
        t = Tensor(arr, self, len(self.nodes), True)
        self.nodes.append(_Node("leaf", (), {}, None, t))
        return t

    def record(self, op_kind: str, inputs, **attrs) -> Tensor:
        op = _OPS.get(op_kind)
        if op is None:
            raise ContractError(f"unknown op kind {op_kind!r}")
        tensors = []
        for x in inputs:
            if isinstance(x, Tensor):
                if x.tape is not None and x.tape is not self:
                    raise ContractError(f"{op_kind}: inputs live on different tapes")
                tensors.append(x)
            else:
                tensors.append(self.const(x))
        xs = [t.data for t in tensors]
        op.check(xs, attrs)
        out, saved = op.forward(xs, attrs)
        pattern = op.branch(xs)
        if pattern is not None:
            self.branches.append(pattern)
        if not any(t.requires_grad for t in tensors):
            return Tensor(out)
        res = Tensor(out, self, len(self.nodes), True)
        self.nodes.append(_Node(op, tuple(tensors), attrs, saved, res))
        self.forward_rows += out.shape[0] if out.ndim == 2 else 1
        return res


def _as_tensor(x, dtype=np.float32):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def record(op_kind: str, inputs, **attrs) -> Tensor:
    """Apply ``op_kind`` to ``inputs``, recording it on their shared tape.

    If no input is on a tape, the op is evaluated eagerly and the result is a
    constant.
    """
    tape = next((x.tape for x in inputs if isinstance(x, Tensor) and x.tape is not None), None)
    if tape is None:
        dtype = next((x.data.dtype for x in inputs if isinstance(x, Tensor)), np.dtype(np.float32))
        tape = Tape(dtype)
    return tape.record(op_kind, inputs, **attrs)


def matmul(a, b):
    return record("matmul", (a, b))


def add(a, b):
    """Elementwise add; ``b`` may be a 1-D row bias broadcast over rows of ``a``."""
    return record("add", (a, b))


def mul(a, b):
    """Elementwise product; ``b`` may be a 1-D row gain broadcast over rows of ``a``."""
    return record("mul", (a, b))


def scale(a, c: float):
    return record("scale", (a,), c=float(c))


def softmax_rows(a):
    return record("softmax_rows", (a,))


def log_softmax_rows(a):
    return record("log_softmax_rows", (a,))


def log(a):
    return record("log", (a,))


def layer_norm_rows(a, eps: float = 1e-5):
    return record("layer_norm_rows", (a,), eps=eps)


def relu(a):
    return record("relu", (a,))


def gather_rows(table, index):
    return record("gather_rows", (table,), index=index)


def sum(a):  # noqa: A001 - mirrors the op name
    return record("sum", (a,))


def row_select(a, rows):
    return record("row_select", (a,), rows=rows)


def transpose(a):
    return record("transpose", (a,))


def attention(q, k, v, heads: int = 1, bias=None):
    """Multi-head attention; ``bias`` is a constant additive ``(n, n)`` score mask."""
    return record("attention", (q, k, v), heads=int(heads), bias=bias)


def row_detach(x, mask: RowMask):
    """Identity forward; backward keeps gradient only on rows in ``mask``."""
    return record("row_detach", (x,), mask=mask)


def backward(root: Tensor) -> dict:
    """Gradients of scalar ``root`` w.r.t. every leaf on its tape that it depends on.

    Returns ``{leaf tensor: ndarray}``. Leaves with no path to ``root`` and
    constants are absent. Visit counts are stored on ``tape.last_backward``.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward: root must be a Tensor")
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if root.tape is None:
        return {}
    tape = root.tape
    nodes = tape.nodes
    n_nodes = n_rows = 0
    by_op: dict[str, int] = {}
    pending: dict[int, _Grad] = {root.index: _Grad(None, np.ones_like(root.data))}
    result = {}
    pop = pending.pop
    for idx in range(root.index, -1, -1):
        g = pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        out = node.out.data
        n_nodes += 1
        r = g.rows.size if g.rows is not None else (out.shape[0] if out.ndim == 2 else 1)
        n_rows += r
        if node.op == "leaf":
            result[node.out] = g.dense(out.shape)
            continue
        kind = node.op.name
        by_op[kind] = by_op.get(kind, 0) + r
        inputs = node.inputs
        grads = node.op.backward(g, [t.data for t in inputs], out, node.saved, node.attrs, node.needs)
        for t, ig, need in zip(inputs, grads, node.needs):
            if ig is None or not need:
                continue
            k = t.index
            prev = pending.get(k)
            pending[k] = ig if prev is None else _accumulate(prev, ig, t.data.shape)
    stats = BackwardStats(n_nodes, int(n_rows), by_op)
    tape.last_backward = stats
    return result


@dataclass(frozen=True)
class GradCheckReport:
    max_error: float
    errors: np.ndarray
    # coordinates whose difference step had to shrink to stay on one smooth piece
    shrunk: int
    # coordinates sitting on a kink at every tried step; excluded from max_error
    skipped: int


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn: Callable[[Tape, Tensor], Tensor], point, eps: float = 1e-3, *, dtype=np.float32,
               fd_dtype=np.float64, max_shrink: int = 4, report: bool = False):
    """Max relative error between the tape gradient and central differences.

    ``fn(tape, x)`` must build a scalar from leaf ``x`` on ``tape``. The
    analytic gradient is taken on a ``dtype`` tape, the differences on a
    ``fd_dtype`` tape. Error per coordinate is
    ``|a - c| / (|a| + |c| + 1e-12)``.

    A central difference that straddles a kink of a piecewise op (relu) does
    not estimate the derivative. For such a coordinate the step is divided by
    10 up to ``max_shrink`` times until both probes land on the same smooth
    piece as ``point``; if none does the coordinate is skipped. With
    ``report=True`` a :class:`GradCheckReport` is returned instead of the float.
    """
    if not (np.isfinite(eps) and eps > 0):
        raise ContractError(f"grad_check: eps must be positive and finite, got {eps}")
    x0 = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise NumericError("grad_check: non-finite point")

    tape = Tape(dtype)
    x = tape.leaf(x0)
    root = fn(tape, x)
    if not np.all(np.isfinite(root.data)):
        raise NumericError("grad_check: non-finite function value")
    analytic = backward(root).get(x)
    analytic = np.zeros_like(x0) if analytic is None else analytic.astype(np.float64)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("grad_check: non-finite analytic gradient")

    def f(v):
        tp = Tape(fd_dtype)
        return float(fn(tp, tp.leaf(v)).data), tp.branches

    _, ref = f(x0)
    central = np.empty_like(x0)
    keep = np.ones(x0.size, dtype=bool)
    shrunk = 0
    flat = x0.reshape(-1)
    cflat = central.reshape(-1)
    for k in range(flat.size):
        step = eps
        for attempt in range(max_shrink + 1):
            xp = flat.copy()
            xm = flat.copy()
            xp[k] += step
            xm[k] -= step
            fp, bp = f(xp.reshape(x0.shape))
            fm, bm = f(xm.reshape(x0.shape))
            cflat[k] = (fp - fm) / (2 * step)
            if _same_branches(bp, ref) and _same_branches(bm, ref):
                shrunk += attempt > 0
                break
            step /= 10
        else:
            keep[k] = False
    if not np.all(np.isfinite(central)):
        raise NumericError("grad_check: non-finite finite differences")
    err = np.abs(analytic - central) / (np.abs(analytic) + np.abs(central) + 1e-12)
    kept = err.reshape(-1)[keep]
    worst = float(kept.max()) if kept.size else 0.0
    if report:
        return GradCheckReport(worst, err, shrunk, int((~keep).sum()))
    return worst
