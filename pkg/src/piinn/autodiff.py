"""Array-valued reverse-mode tape and a forward-mode dual layer.

Every differentiable quantity in the package flows through the functions in
this module.  Each function accepts plain numpy arrays, tape variables
(:class:`Var`) or dual numbers (:class:`Dual`) and dispatches accordingly, so
the same model code runs as fast numpy inference, as a recorded computation,
or with spatial tangents attached.

Arithmetic primitives: add, sub, neg, mul, matmul, exp, log, sin, cos, relu,
sum, square, reciprocal.  Structural primitives (no arithmetic): getitem,
permute, concat, reshape, transpose.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "Dual",
    "Gradients",
    "backward",
    "directional_derivative",
    "value",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "exp",
    "log",
    "sin",
    "cos",
    "relu",
    "sum",
    "mean",
    "square",
    "reciprocal",
    "concat",
    "permute",
    "reshape",
    "transpose",
]


class Tape:
    """Append-only record of primitive operations.

    Node ids are list positions, so every parent id is smaller than the id of
    its child and reverse iteration is a valid topological order.
    """

    __slots__ = ("ops", "parents", "attrs", "values", "needs")

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple] = []
        self.attrs: list = []
        self.values: list[np.ndarray] = []
        self.needs: list[bool] = []

    def __len__(self):
        return len(self.ops)

    def _push(self, op, parents, val, attrs=None):
        needs = self.needs
        flag = False
        for p in parents:
            if needs[p]:
                flag = True
                break
        return self._append(op, parents, val, attrs, flag)

    def _append(self, op, parents, val, attrs, flag):
        self.ops.append(op)
        self.parents.append(parents)
        self.attrs.append(attrs)
        self.values.append(val)
        self.needs.append(flag)
        return Var(self, len(self.ops) - 1)

    def leaf(self, val, requires_grad=True):
        """Register an input array; gradients are tracked when ``requires_grad``."""
        arr = np.asarray(val, dtype=np.float64)
        self.ops.append("leaf" if requires_grad else "const")
        self.parents.append(())
        self.attrs.append(None)
        self.values.append(arr)
        self.needs.append(bool(requires_grad))
        return Var(self, len(self.ops) - 1)

    def const(self, val):
        return self.leaf(val, requires_grad=False)

    def replay(self):
        """Recompute every node from the leaves; returns the fresh values."""
        vals = []
        for op, par, att, old in zip(self.ops, self.parents, self.attrs, self.values):
            if op in ("leaf", "const"):
                vals.append(old)
            else:
                vals.append(_FORWARD[op](*[vals[p] for p in par], att))
        return vals


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000.0

    def __init__(self, tape, idx):
        self.tape = tape
        self.id = idx

    @property
    def value(self):
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.tape.values[self.id].shape

    @property
    def ndim(self):
        return self.tape.values[self.id].ndim

    def __len__(self):
        return len(self.tape.values[self.id])

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        if isinstance(o, (Var, Dual)):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / np.asarray(o, dtype=np.float64))

    def __rtruediv__(self, o):
        return mul(o, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Dual:
    """Value with one or more tangent directions.

    ``primal`` and each entry of ``tangents`` may be numpy arrays or tape
    variables; in the latter case parameter gradients of directional
    derivatives are available through :func:`backward`.
    """

    __slots__ = ("primal", "tangents")
    __array_priority__ = 2000.0

    def __init__(self, primal, tangents):
        self.primal = primal
        self.tangents = tuple(tangents)

    @property
    def tangent(self):
        if len(self.tangents) != 1:
            raise ValueError("Dual carries %d tangents" % len(self.tangents))
        return self.tangents[0]

    @property
    def shape(self):
        return np.shape(value(self.primal))

    def __repr__(self):
        return f"Dual(shape={self.shape}, k={len(self.tangents)})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        if isinstance(o, (Var, Dual)):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / np.asarray(o, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return Dual(_getitem(self.primal, idx), [_getitem(t, idx) for t in self.tangents])

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def value(x):
    """Numeric value of an array, tape variable or dual primal."""
    if isinstance(x, Var):
        return x.tape.values[x.id]
    if isinstance(x, Dual):
        return value(x.primal)
    return x


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _node(tape, x):
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x.id
    return tape.const(x).id


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a):
    return a.T if a.ndim == 2 else a.swapaxes(-1, -2)


# forward rules: f(*parent_values, attrs) -> value
_FORWARD = {
    "add": lambda a, b, _: a + b,
    "sub": lambda a, b, _: a - b,
    "neg": lambda a, _: -a,
    "mul": lambda a, b, _: a * b,
    "matmul": lambda a, b, _: a @ b,
    "exp": lambda a, _: np.exp(a),
    "log": lambda a, _: np.log(a),
    "sin": lambda a, _: np.sin(a),
    "cos": lambda a, _: np.cos(a),
    "relu": lambda a, _: np.maximum(a, 0.0),
    "sum": lambda a, att: np.sum(a, axis=att[0], keepdims=att[1]),
    "square": lambda a, _: a * a,
    "reciprocal": lambda a, _: 1.0 / a,
    "getitem": lambda a, att: a[att],
    "permute": lambda a, att: a[..., att[0]],
    "concat": lambda *args: np.concatenate(args[:-1], axis=args[-1][0]),
    "reshape": lambda a, att: a.reshape(att),
    "transpose": lambda a, att: np.transpose(a, att),
}


def _vjp_sum(g, a, att):
    axis, keepdims = att
    if axis is None:
        return np.full(a.shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    out = np.empty(a.shape)
    out[...] = g
    return out


def _vjp_getitem(g, a, att):
    out = np.zeros_like(a)
    idx = att
    simple = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                 for i in (idx if isinstance(idx, tuple) else (idx,)))
    if simple:
        out[idx] = g
    else:
        np.add.at(out, idx, g)
    return out


def _vjp_concat(g, *args):
    att = args[-1]
    axis = att[0]
    out = []
    off = 0
    lead = (slice(None),) * (axis % g.ndim)
    for a in args[:-1]:
        n = a.shape[axis]
        out.append(g[lead + (slice(off, off + n),)])
        off += n
    return tuple(out)


# reverse rules: f(g, out, parent_values..., attrs, needs) -> tuple of parent grads
def _vjp(op, g, out, pv, att, needs):
    if op == "add":
        a, b = pv
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)
    if op == "sub":
        a, b = pv
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)
    if op == "mul":
        a, b = pv
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)
    if op == "matmul":
        a, b = pv
        ga = _unbroadcast(g @ _swap(b), a.shape) if needs[0] else None
        gb = _unbroadcast(_swap(a) @ g, b.shape) if needs[1] else None
        return ga, gb
    if op == "relu":
        return (g * (pv[0] > 0.0),)
    if op == "exp":
        return (g * out,)
    if op == "neg":
        return (-g,)
    if op == "square":
        return (2.0 * g * pv[0],)
    if op == "sum":
        return (_vjp_sum(g, pv[0], att),)
    if op == "log":
        return (g / pv[0],)
    if op == "reciprocal":
        return (-g * out * out,)
    if op == "sin":
        return (g * np.cos(pv[0]),)
    if op == "cos":
        return (-g * np.sin(pv[0]),)
    if op == "getitem":
        return (_vjp_getitem(g, pv[0], att),)
    if op == "permute":
        return (g[..., att[1]],)
    if op == "concat":
        return _vjp_concat(g, *pv, att)
    if op == "reshape":
        return (g.reshape(pv[0].shape),)
    if op == "transpose":
        return (np.transpose(g, np.argsort(att)),)
    raise KeyError(op)


class Gradients:
    """Mapping node -> gradient; untouched nodes report zeros."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node):
        idx = node.id if isinstance(node, Var) else int(node)
        g = self._grads[idx] if idx < len(self._grads) else None
        if g is None:
            return np.zeros_like(self._tape.values[idx])
        return np.asarray(g)

    def __contains__(self, node):
        idx = node.id if isinstance(node, Var) else int(node)
        return idx < len(self._grads) and self._grads[idx] is not None

    def __len__(self):
        return len(self._tape)


def backward(tape, output):
    """Gradient of the scalar ``output`` with respect to every node of ``tape``."""
    if not isinstance(output, Var) or output.tape is not tape:
        raise ValueError("output must be a node of the given tape")
    out_id = output.id
    if tape.values[out_id].size != 1:
        raise ValueError(
            "backward needs a scalar output, got shape %s" % (tape.values[out_id].shape,))
    grads = [None] * (out_id + 1)
    grads[out_id] = np.ones_like(tape.values[out_id])
    ops, parents, attrs, values, needs = tape.ops, tape.parents, tape.attrs, tape.values, tape.needs
    for i in range(out_id, -1, -1):
        g = grads[i]
        if g is None or not needs[i]:
            continue
        op = ops[i]
        if op == "leaf":
            continue
        par = parents[i]
        if len(par) == 1:
            p = par[0]
            if op == "relu":
                gp = g * (values[p] > 0.0)
            elif op == "exp":
                gp = g * values[i]
            else:
                gp = _vjp(op, g, values[i], (values[p],), attrs[i], (True,))[0]
            cur = grads[p]
            grads[p] = gp if cur is None else cur + gp
            continue
        pv = [values[p] for p in par]
        pn = [needs[p] for p in par]
        pg = _vjp(op, g, values[i], pv, attrs[i], pn)
        for p, gp in zip(par, pg):
            if gp is None or not needs[p]:
                continue
            cur = grads[p]
            grads[p] = gp if cur is None else cur + gp
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# dispatching primitives


def _binary(op, npf, a, b):
    if type(a) is Var:
        tape = a.tape
        ia = a.id
        if type(b) is Var:
            if b.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            ib = b.id
        else:
            ib = tape.const(b).id
    elif type(b) is Var:
        tape = b.tape
        ib = b.id
        ia = tape.const(a).id
    else:
        return npf(a, b)
    vals, needs = tape.values, tape.needs
    return tape._append(op, (ia, ib), npf(vals[ia], vals[ib]), None, needs[ia] or needs[ib])


def _unary(op, npf, a, attrs=None):
    if type(a) is Var:
        tape = a.tape
        i = a.id
        return tape._append(op, (i,), npf(tape.values[i]), attrs, tape.needs[i])
    return npf(a)


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual_linear2(add, a, b, +1.0)
    return _binary("add", np.add, a, b)


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual_linear2(sub, a, b, -1.0)
    return _binary("sub", np.subtract, a, b)


def neg(a):
    if isinstance(a, Dual):
        return Dual(neg(a.primal), [neg(t) for t in a.tangents])
    return _unary("neg", np.negative, a)


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        if isinstance(a, Dual) and isinstance(b, Dual):
            return Dual(mul(a.primal, b.primal),
                        [add(mul(ta, b.primal), mul(a.primal, tb))
                         for ta, tb in zip(a.tangents, b.tangents)])
        if isinstance(a, Dual):
            return Dual(mul(a.primal, b), [mul(t, b) for t in a.tangents])
        return Dual(mul(a, b.primal), [mul(a, t) for t in b.tangents])
    return _binary("mul", np.multiply, a, b)


def matmul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        if isinstance(a, Dual) and isinstance(b, Dual):
            return Dual(matmul(a.primal, b.primal),
                        [add(matmul(ta, b.primal), matmul(a.primal, tb))
                         for ta, tb in zip(a.tangents, b.tangents)])
        if isinstance(a, Dual):
            return Dual(matmul(a.primal, b), [matmul(t, b) for t in a.tangents])
        return Dual(matmul(a, b.primal), [matmul(a, t) for t in b.tangents])
    return _binary("matmul", np.matmul, a, b)


def _dual_linear2(fn, a, b, sign):
    if isinstance(a, Dual) and isinstance(b, Dual):
        return Dual(fn(a.primal, b.primal), [fn(ta, tb) for ta, tb in zip(a.tangents, b.tangents)])
    if isinstance(a, Dual):
        return Dual(fn(a.primal, b), a.tangents)
    return Dual(fn(a, b.primal), b.tangents if sign > 0 else [neg(t) for t in b.tangents])


def exp(a):
    if isinstance(a, Dual):
        e = exp(a.primal)
        return Dual(e, [mul(t, e) for t in a.tangents])
    return _unary("exp", np.exp, a)


def log(a):
    if isinstance(a, Dual):
        inv = reciprocal(a.primal)
        return Dual(log(a.primal), [mul(t, inv) for t in a.tangents])
    return _unary("log", np.log, a)


def sin(a):
    if isinstance(a, Dual):
        c = cos(a.primal)
        return Dual(sin(a.primal), [mul(t, c) for t in a.tangents])
    return _unary("sin", np.sin, a)


def cos(a):
    if isinstance(a, Dual):
        s = neg(sin(a.primal))
        return Dual(cos(a.primal), [mul(t, s) for t in a.tangents])
    return _unary("cos", np.cos, a)


def relu(a):
    if isinstance(a, Dual):
        mask = (value(a.primal) > 0.0).astype(np.float64)
        return Dual(relu(a.primal), [mul(t, mask) for t in a.tangents])
    return _unary("relu", _np_relu, a)


def _np_relu(a):
    return np.maximum(a, 0.0)


def square(a):
    if isinstance(a, Dual):
        two_p = mul(a.primal, 2.0)
        return Dual(square(a.primal), [mul(t, two_p) for t in a.tangents])
    return _unary("square", np.square, a)


def reciprocal(a):
    if isinstance(a, Dual):
        r = reciprocal(a.primal)
        r2 = neg(square(r))
        return Dual(r, [mul(t, r2) for t in a.tangents])
    return _unary("reciprocal", np.reciprocal, a)


def sum(a, axis=None, keepdims=False):
    if isinstance(a, Dual):
        return Dual(sum(a.primal, axis, keepdims), [sum(t, axis, keepdims) for t in a.tangents])
    if isinstance(a, Var):
        att = (axis, keepdims)
        return a.tape._push("sum", (a.id,), np.sum(a.value, axis=axis, keepdims=keepdims), att)
    return np.sum(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    shape = np.shape(value(a))
    if axis is None:
        n = int(np.prod(shape))
    elif isinstance(axis, tuple):
        n = int(np.prod([shape[i] for i in axis]))
    else:
        n = shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _getitem(a, idx):
    if isinstance(a, Var):
        return a.tape._push("getitem", (a.id,), a.value[idx], idx)
    return a[idx]


def permute(a, perm):
    """Reorder the last axis: ``out[..., k] = a[..., perm[k]]``."""
    perm = np.asarray(perm)
    if isinstance(a, Dual):
        return Dual(permute(a.primal, perm), [permute(t, perm) for t in a.tangents])
    if isinstance(a, Var):
        inv = np.argsort(perm)
        return a.tape._push("permute", (a.id,), a.value[..., perm], (perm, inv))
    return a[..., perm]


def concat(parts, axis=-1):
    parts = list(parts)
    if any(isinstance(p, Dual) for p in parts):
        k = next(len(p.tangents) for p in parts if isinstance(p, Dual))
        prim = concat([p.primal if isinstance(p, Dual) else p for p in parts], axis)
        tans = []
        for j in range(k):
            tans.append(concat([p.tangents[j] if isinstance(p, Dual) else np.zeros_like(value(p))
                                for p in parts], axis))
        return Dual(prim, tans)
    tape = _tape_of(parts)
    if tape is None:
        return np.concatenate(parts, axis=axis)
    ids = tuple(_node(tape, p) for p in parts)
    val = np.concatenate([tape.values[i] for i in ids], axis=axis)
    return tape._push("concat", ids, val, (axis,))


def reshape(a, shape):
    if isinstance(a, Dual):
        return Dual(reshape(a.primal, shape), [reshape(t, shape) for t in a.tangents])
    if isinstance(a, Var):
        return a.tape._push("reshape", (a.id,), a.value.reshape(shape), tuple(shape))
    return np.reshape(a, shape)


def transpose(a, axes=None):
    if isinstance(a, Dual):
        return Dual(transpose(a.primal, axes), [transpose(t, axes) for t in a.tangents])
    if isinstance(a, Var):
        if axes is None:
            axes = tuple(range(a.ndim - 1, -1, -1))
        return a.tape._push("transpose", (a.id,), np.transpose(a.value, axes), tuple(axes))
    return np.transpose(a, axes)


def directional_derivative(f, x, direction):
    """Derivative of ``f`` at ``x`` along ``direction`` by dual propagation.

    ``f`` must be built from the primitives of this module.  The result is a
    tape variable whenever ``f`` closes over tape-valued parameters.
    """
    xv = np.shape(value(x))
    dv = np.shape(value(direction))
    if xv != dv:
        raise ValueError("direction shape %s does not match x shape %s" % (dv, xv))
    out = f(Dual(x, [direction]))
    if not isinstance(out, Dual):
        return np.zeros_like(np.asarray(value(out), dtype=np.float64))
    return out.tangents[0]
