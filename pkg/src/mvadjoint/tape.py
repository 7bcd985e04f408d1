"""Operator-overloading reverse-mode differentiation over numpy arrays.

A :class:`TracedArray` wraps a float64 array and a node index on a
:class:`Tape`.  Because it implements ``__array_ufunc__`` and
``__array_function__``, ordinary numpy code (``np.sqrt(x)``,
``np.concatenate([...])``, ``a * b``) records itself when any operand is
traced and runs untouched otherwise.  A scalar is simply a 0-d traced array.

Every forward value is produced by exactly the numpy call the untraced code
would make, so traced and untraced evaluations agree bitwise.

Branching (``np.where``, ``np.maximum``, comparisons) is frozen at the
recorded values: comparisons return plain boolean arrays, and the selection
mask is stored on the tape.

Adjoints carry a leading batch axis so one sweep can propagate many seeds
at once (used for colored Jacobian extraction).
"""
from __future__ import annotations

import numpy as np

from .errors import SeedDimensionMismatch, UnsupportedPrimitive

__all__ = [
    "Tape",
    "TracedArray",
    "record",
    "reverse_sweep",
    "smooth_abs",
    "smooth_max",
    "smooth_min",
    "value_of",
]


def value_of(x):
    """Underlying ndarray of a traced value (identity for plain data)."""
    return x.value if isinstance(x, TracedArray) else x


def _unbroadcast(g, shape):
    # g has shape (B,) + broadcast_shape; reduce to (B,) + shape
    extra = g.ndim - 1 - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(1, 1 + extra)))
    axes = tuple(k + 1 for k, n in enumerate(shape) if n == 1 and g.shape[k + 1] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class _Record:
    __slots__ = ("op", "parents", "out", "ctx")

    def __init__(self, op, parents, out, ctx):
        self.op = op
        self.parents = parents
        self.out = out
        self.ctx = ctx


class Tape:
    """Linear record of array operations with a reverse sweep."""

    def __init__(self):
        self.records = []
        self.shapes = []
        self.values = []
        self.inputs = []
        self.outputs = []

    # -- recording -------------------------------------------------------
    def _new_node(self, value):
        self.shapes.append(value.shape)
        self.values.append(value)
        return len(self.shapes) - 1

    def variable(self, value):
        """Register an independent input and return its traced handle."""
        value = np.array(value, dtype=np.float64)
        t = TracedArray(value, self._new_node(value), self)
        self.inputs.append(t.node_id)
        return t

    def register_output(self, x):
        if not isinstance(x, TracedArray) or x.tape is not self:
            # constant output: give it a node so the seed bookkeeping works
            value = np.array(value_of(x), dtype=np.float64)
            x = TracedArray(value, self._new_node(value), self)
        self.outputs.append(x.node_id)
        return x

    def _emit(self, op, parents, value, ctx=None):
        node = self._new_node(value)
        self.records.append(_Record(op, parents, node, ctx))
        return TracedArray(value, node, self)

    # -- statistics ------------------------------------------------------
    @property
    def n_records(self):
        return len(self.records)

    @property
    def nbytes(self):
        """Bytes held by the tape: node values plus saved branch masks."""
        total = sum(v.nbytes for v in self.values)
        for rec in self.records:
            ctx = rec.ctx
            if isinstance(ctx, np.ndarray):
                total += ctx.nbytes
            elif isinstance(ctx, tuple):
                total += sum(c.nbytes for c in ctx if isinstance(c, np.ndarray))
        return int(total)

    def stats(self):
        return {
            "records": self.n_records,
            "nodes": len(self.shapes),
            "inputs": len(self.inputs),
            "outputs": len(self.outputs),
            "bytes": self.nbytes,
        }

    # -- replay ------------------------------------------------------------
    def replay(self):
        """Recompute every recorded node from the input values.

        Returns the output values.  Branch masks stay frozen, so replay at the
        recorded inputs reproduces the recorded outputs bitwise.
        """
        vals = list(self.values)
        for rec in self.records:
            consts = _consts(rec)
            args = [vals[p] if p is not None else consts[k] for k, p in enumerate(rec.parents)]
            vals[rec.out] = _FORWARD[rec.op](args, rec.ctx)
        return [vals[k] for k in self.outputs]

    # -- reverse sweep ---------------------------------------------------
    def gradient(self, seeds, batched=False, wrt=None):
        """Vector-Jacobian product for the registered outputs.

        ``seeds`` holds one array per output (shape of that output, or with a
        leading batch axis when ``batched``).  Returns one array per input in
        ``wrt`` (default: all registered inputs).
        """
        if not isinstance(seeds, (list, tuple)):
            seeds = [seeds]
        if len(seeds) != len(self.outputs):
            raise SeedDimensionMismatch(
                f"expected {len(self.outputs)} seed(s), got {len(seeds)}")
        adj = [None] * len(self.shapes)
        nbatch = None
        for node, s in zip(self.outputs, seeds):
            s = np.asarray(s, dtype=np.float64)
            shape = self.shapes[node]
            if not batched:
                s = s[None, ...]
            if s.shape[1:] != shape and not (s.shape[1:] == () and shape == ()):
                raise SeedDimensionMismatch(
                    f"seed shape {s.shape[1:]} does not match output shape {shape}")
            if nbatch is None:
                nbatch = s.shape[0]
            elif s.shape[0] != nbatch:
                raise SeedDimensionMismatch("inconsistent batch sizes across seeds")
            adj[node] = s.copy() if adj[node] is None else adj[node] + s
        vals = self.values
        for rec in reversed(self.records):
            g = adj[rec.out]
            if g is None:
                continue
            grads = _BACKWARD[rec.op](g, rec, vals)
            for p, gp in zip(rec.parents, grads):
                if p is None or gp is None:
                    continue
                if adj[p] is None:
                    adj[p] = gp
                else:
                    adj[p] = adj[p] + gp
        targets = self.inputs if wrt is None else [w.node_id if isinstance(w, TracedArray) else w
                                                   for w in wrt]
        out = []
        for node in targets:
            g = adj[node]
            if g is None:
                g = np.zeros((nbatch,) + self.shapes[node])
            out.append(g if batched else g[0])
        return out


class TracedArray:
    """Array value recorded on a tape."""

    __slots__ = ("value", "node_id", "tape")
    __array_priority__ = 1000

    def __init__(self, value, node_id, tape):
        self.value = value
        self.node_id = node_id
        self.tape = tape

    def __repr__(self):
        return f"TracedArray(node={self.node_id}, value={self.value!r})"

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)
    dtype = property(lambda self: self.value.dtype)

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    # arithmetic routes through __array_ufunc__
    def __add__(self, o): return np.add(self, o)
    def __radd__(self, o): return np.add(o, self)
    def __sub__(self, o): return np.subtract(self, o)
    def __rsub__(self, o): return np.subtract(o, self)
    def __mul__(self, o): return np.multiply(self, o)
    def __rmul__(self, o): return np.multiply(o, self)
    def __truediv__(self, o): return np.true_divide(self, o)
    def __rtruediv__(self, o): return np.true_divide(o, self)
    def __pow__(self, o): return np.power(self, o)
    def __rpow__(self, o): return np.power(o, self)
    def __neg__(self): return np.negative(self)
    def __pos__(self): return self

    # comparisons are evaluated on values: control flow is frozen
    def __lt__(self, o): return self.value < value_of(o)
    def __le__(self, o): return self.value <= value_of(o)
    def __gt__(self, o): return self.value > value_of(o)
    def __ge__(self, o): return self.value >= value_of(o)

    def __getitem__(self, idx):
        return self.tape._emit("getitem", (self.node_id,), self.value[idx], idx)

    def sum(self, axis=None, keepdims=False):
        return np.sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return np.reshape(self, shape)

    @property
    def T(self):
        return np.transpose(self)

    # -- numpy protocols -------------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            raise UnsupportedPrimitive(f"{ufunc.__name__}.{method} is not supported on traced arrays")
        if ufunc in _COMPARISONS:
            return ufunc(*[value_of(a) for a in inputs])
        op = _UFUNC_OPS.get(ufunc)
        if op is None:
            raise UnsupportedPrimitive(f"ufunc {ufunc.__name__!r} is not differentiable on the tape")
        tape = _common_tape(inputs)
        vals = [value_of(a) for a in inputs]
        value = np.asarray(ufunc(*vals), dtype=np.float64)
        parents = tuple(a.node_id if isinstance(a, TracedArray) else None for a in inputs)
        shapes = tuple(np.shape(v) for v in vals)
        consts = tuple(None if isinstance(a, TracedArray) else a for a in inputs)
        if op == "maximum":
            ctx = (np.asarray(vals[0] >= vals[1]), shapes, consts)
        elif op == "minimum":
            ctx = (np.asarray(vals[0] <= vals[1]), shapes, consts)
        else:
            ctx = (shapes, consts)
        return tape._emit(op, parents, value, ctx)

    def __array_function__(self, func, types, args, kwargs):
        handler = _FUNCTIONS.get(func)
        if handler is None:
            raise UnsupportedPrimitive(f"numpy function {func.__name__!r} is not supported on traced arrays")
        return handler(*args, **kwargs)


def _common_tape(objs):
    tape = None
    for a in objs:
        if isinstance(a, TracedArray):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise UnsupportedPrimitive("operands recorded on different tapes")
    return tape


_COMPARISONS = {np.less, np.less_equal, np.greater, np.greater_equal, np.equal, np.not_equal,
                np.isfinite, np.isnan, np.sign}

_UFUNC_OPS = {
    np.add: "add",
    np.subtract: "sub",
    np.multiply: "mul",
    np.true_divide: "div",
    np.negative: "neg",
    np.positive: "pos",
    np.power: "pow",
    np.square: "square",
    np.sqrt: "sqrt",
    np.exp: "exp",
    np.log: "log",
    np.sin: "sin",
    np.cos: "cos",
    np.tanh: "tanh",
    np.maximum: "maximum",
    np.minimum: "minimum",
}


# ---------------------------------------------------------------------------
# array functions

def _parents_consts(objs):
    parents = tuple(a.node_id if isinstance(a, TracedArray) else None for a in objs)
    consts = tuple(None if isinstance(a, TracedArray) else np.asarray(a, dtype=np.float64)
                   for a in objs)
    return parents, consts


def _f_concatenate(arrays, axis=0, **kw):
    arrays = list(arrays)
    tape = _common_tape(arrays)
    vals = [value_of(a) for a in arrays]
    value = np.concatenate(vals, axis=axis)
    ax = axis % value.ndim
    splits = tuple(int(k) for k in np.cumsum([np.shape(v)[ax] for v in vals])[:-1])
    parents, consts = _parents_consts(arrays)
    return tape._emit("concatenate", parents, value, (ax, splits, consts))


def _f_stack(arrays, axis=0, **kw):
    arrays = list(arrays)
    tape = _common_tape(arrays)
    value = np.stack([value_of(a) for a in arrays], axis=axis)
    parents, consts = _parents_consts(arrays)
    return tape._emit("stack", parents, value, (axis % value.ndim, consts))


def _f_where(cond, a, b):
    cond = np.asarray(value_of(cond), dtype=bool)
    tape = _common_tape((a, b))
    va, vb = value_of(a), value_of(b)
    value = np.asarray(np.where(cond, va, vb), dtype=np.float64)
    parents, consts = _parents_consts((a, b))
    return tape._emit("where", parents, value, (cond, (np.shape(va), np.shape(vb)), consts))


def _f_sum(a, axis=None, keepdims=False, **kw):
    value = np.asarray(np.sum(a.value, axis=axis, keepdims=keepdims))
    return a.tape._emit("sum", (a.node_id,), value, (axis, keepdims, a.value.shape))


def _f_reshape(a, newshape=None, *args, **kw):
    if newshape is None:
        newshape = kw.get("shape")
    value = np.reshape(a.value, newshape)
    return a.tape._emit("reshape", (a.node_id,), value, (a.value.shape, value.shape))


def _f_broadcast_to(a, shape, **kw):
    value = np.broadcast_to(a.value, shape).copy()
    return a.tape._emit("broadcast", (a.node_id,), value, (a.value.shape, value.shape))


def _f_transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    value = np.transpose(a.value, axes)
    return a.tape._emit("transpose", (a.node_id,), value, tuple(axes))


def _f_abs(*args, **kw):
    raise UnsupportedPrimitive("abs has a kink at zero; use smooth_abs")


_FUNCTIONS = {
    np.concatenate: _f_concatenate,
    np.stack: _f_stack,
    np.where: _f_where,
    np.sum: _f_sum,
    np.reshape: _f_reshape,
    np.broadcast_to: _f_broadcast_to,
    np.transpose: _f_transpose,
    np.shape: lambda a: np.shape(a.value),
    np.ndim: lambda a: a.value.ndim,
    np.zeros_like: lambda a, *args, **kw: np.zeros_like(a.value, *args, **kw),
    np.ones_like: lambda a, *args, **kw: np.ones_like(a.value, *args, **kw),
}


# ---------------------------------------------------------------------------
# forward replay rules: f(args, ctx) -> value

def _consts(rec):
    op, ctx = rec.op, rec.ctx
    if op in ("maximum", "minimum"):
        return ctx[2]
    if op in _UFUNC_NAMES:
        return ctx[1]
    if op in ("where", "stack", "concatenate"):
        return ctx[-1]
    return (None,) * len(rec.parents)


def _ufunc_fwd(fn):
    return lambda args, ctx: np.asarray(fn(*args), dtype=np.float64)


_UFUNC_NAMES = set(_UFUNC_OPS.values())
_FORWARD = {name: _ufunc_fwd(uf) for uf, name in _UFUNC_OPS.items()}
_FORWARD.update({
    "maximum": lambda args, ctx: np.asarray(np.where(ctx[0], args[0], args[1]), dtype=np.float64),
    "minimum": lambda args, ctx: np.asarray(np.where(ctx[0], args[0], args[1]), dtype=np.float64),
    "getitem": lambda args, ctx: args[0][ctx],
    "concatenate": lambda args, ctx: np.concatenate(args, axis=ctx[0]),
    "stack": lambda args, ctx: np.stack(args, axis=ctx[0]),
    "where": lambda args, ctx: np.asarray(np.where(ctx[0], args[0], args[1]), dtype=np.float64),
    "sum": lambda args, ctx: np.asarray(np.sum(args[0], axis=ctx[0], keepdims=ctx[1])),
    "reshape": lambda args, ctx: np.reshape(args[0], ctx[1]),
    "broadcast": lambda args, ctx: np.broadcast_to(args[0], ctx[1]).copy(),
    "transpose": lambda args, ctx: np.transpose(args[0], ctx),
})


# ---------------------------------------------------------------------------
# backward rules: (g, rec, values) -> one adjoint (or None) per parent

def _operands(rec, vals):
    consts = _consts(rec)
    return [vals[p] if p is not None else consts[k] for k, p in enumerate(rec.parents)]


def _bw_add(g, rec, vals):
    sa, sb = rec.ctx[0]
    pa, pb = rec.parents
    return (_unbroadcast(g, sa) if pa is not None else None,
            _unbroadcast(g, sb) if pb is not None else None)


def _bw_sub(g, rec, vals):
    sa, sb = rec.ctx[0]
    pa, pb = rec.parents
    return (_unbroadcast(g, sa) if pa is not None else None,
            _unbroadcast(-g, sb) if pb is not None else None)


def _bw_mul(g, rec, vals):
    sa, sb = rec.ctx[0]
    pa, pb = rec.parents
    a, b = _operands(rec, vals)
    return (_unbroadcast(g * b, sa) if pa is not None else None,
            _unbroadcast(g * a, sb) if pb is not None else None)


def _bw_div(g, rec, vals):
    sa, sb = rec.ctx[0]
    pa, pb = rec.parents
    a, b = _operands(rec, vals)
    ga = g / b
    return (_unbroadcast(ga, sa) if pa is not None else None,
            _unbroadcast(-ga * vals[rec.out], sb) if pb is not None else None)


def _bw_pow(g, rec, vals):
    sa, sb = rec.ctx[0]
    pa, pb = rec.parents
    a, b = _operands(rec, vals)
    ga = gb = None
    if pa is not None:
        ga = _unbroadcast(g * (b * np.power(a, b - 1.0)), sa)
    if pb is not None:
        gb = _unbroadcast(g * (vals[rec.out] * np.log(a)), sb)
    return ga, gb


def _bw_unary(deriv):
    def bw(g, rec, vals):
        a = vals[rec.parents[0]]
        return (g * deriv(a, vals[rec.out]),)
    return bw


def _bw_select(g, rec, vals):
    mask, (sa, sb) = rec.ctx[0], rec.ctx[1]
    pa, pb = rec.parents
    return (_unbroadcast(np.where(mask, g, 0.0), sa) if pa is not None else None,
            _unbroadcast(np.where(mask, 0.0, g), sb) if pb is not None else None)


def _is_basic_index(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in idx)


def _bw_getitem(g, rec, vals):
    idx = rec.ctx
    out = np.zeros((g.shape[0],) + vals[rec.parents[0]].shape)
    full = (slice(None),) + (idx if isinstance(idx, tuple) else (idx,))
    if _is_basic_index(idx):
        out[full] += g
    else:
        np.add.at(out, full, g)
    return (out,)


def _bw_concatenate(g, rec, vals):
    ax, splits = rec.ctx[0], rec.ctx[1]
    return tuple(np.split(g, splits, axis=ax + 1))


def _bw_stack(g, rec, vals):
    ax = rec.ctx[0]
    return tuple(np.take(g, k, axis=ax + 1) for k in range(len(rec.parents)))


def _bw_sum(g, rec, vals):
    axis, keepdims, shape = rec.ctx
    nb = g.shape[0]
    if axis is None:
        g = g.reshape((nb,) + (1,) * len(shape))
    elif not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        for a in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, a + 1)
    return (np.broadcast_to(g, (nb,) + shape).copy(),)


def _bw_transpose(g, rec, vals):
    inv = np.argsort(rec.ctx)
    return (np.transpose(g, (0,) + tuple(int(a) + 1 for a in inv)),)


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "pow": _bw_pow,
    "neg": lambda g, rec, vals: (-g,),
    "pos": lambda g, rec, vals: (g,),
    "square": _bw_unary(lambda a, y: 2.0 * a),
    "sqrt": _bw_unary(lambda a, y: 0.5 / y),
    "exp": _bw_unary(lambda a, y: y),
    "log": _bw_unary(lambda a, y: 1.0 / a),
    "sin": _bw_unary(lambda a, y: np.cos(a)),
    "cos": _bw_unary(lambda a, y: -np.sin(a)),
    "tanh": _bw_unary(lambda a, y: 1.0 - y * y),
    "maximum": _bw_select,
    "minimum": _bw_select,
    "where": _bw_select,
    "getitem": _bw_getitem,
    "concatenate": _bw_concatenate,
    "stack": _bw_stack,
    "sum": _bw_sum,
    "reshape": lambda g, rec, vals: (g.reshape((g.shape[0],) + rec.ctx[0]),),
    "broadcast": lambda g, rec, vals: (_unbroadcast(g, rec.ctx[0]),),
    "transpose": _bw_transpose,
}


# ---------------------------------------------------------------------------
# smooth replacements for kinked primitives

def smooth_abs(x, eps):
    """sqrt(x^2 + eps^2): differentiable everywhere, >= |x|."""
    return np.sqrt(x * x + eps * eps)


def smooth_max(a, b, eps):
    return 0.5 * (a + b + smooth_abs(a - b, eps))


def smooth_min(a, b, eps):
    return 0.5 * (a + b - smooth_abs(a - b, eps))


# ---------------------------------------------------------------------------
# functional interface

def record(fn, inputs):
    """Trace ``fn(*inputs)`` on a fresh tape.

    ``inputs`` is a sequence of arrays (or floats); each becomes a registered
    tape input.  Returns ``(outputs, tape)`` where ``outputs`` is the list of
    output values as plain arrays.
    """
    tape = Tape()
    traced = [tape.variable(x) for x in inputs]
    result = fn(*traced)
    if not isinstance(result, (list, tuple)):
        result = [result]
    outs = [tape.register_output(r) for r in result]
    return [np.array(o.value) for o in outs], tape


def reverse_sweep(tape, seed, batched=False):
    """Gradient of ``sum(seed_k * output_k)`` with respect to every input."""
    return tape.gradient(seed, batched=batched)
