"""Minimal dual-purpose automatic differentiation.

Forward mode (``Dual``) propagates tangents for JVPs and exact Jacobians;
reverse mode (``Tape``/``Node``) accumulates adjoints for training gradients.
Only the fixed primitive set the flow-map network needs is supported:
affine, tanh, silu, sin, cos, square, sum, mean, concatenate, elementwise
arithmetic, and a stop-gradient marker. Everything is float64.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray


class AutodiffError(Exception):
    pass


class UnsupportedPrimitiveError(AutodiffError):
    """An operation outside the fixed primitive set was requested."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"unsupported primitive: {op}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError):
    """A non-finite value appeared during evaluation."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite value at {where}")


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _silu_val_deriv(p: Array) -> tuple[Array, Array]:
    s = 1.0 / (1.0 + np.exp(-p))
    return p * s, s * (1.0 + p * (1.0 - s))


# ---------------------------------------------------------------------------
# ParamStore
# ---------------------------------------------------------------------------


class ParamStore:
    """Flat float64 parameter vector with a (name, shape) layout.

    Every named tensor maps to a contiguous, non-overlapping slice of
    ``values``; the layout order defines the slice order.
    """

    def __init__(self, layout: Sequence[tuple[str, tuple[int, ...]]], values: Array | None = None):
        self.layout = [(str(n), tuple(int(d) for d in s)) for n, s in layout]
        names = [n for n, _ in self.layout]
        if len(set(names)) != len(names):
            raise ValueError("duplicate tensor names in layout")
        self._offsets: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        off = 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            self._offsets[name] = (off, size, shape)
            off += size
        self.size = off
        if values is None:
            self.values = np.zeros(self.size, dtype=np.float64)
        else:
            values = _as_f64(values).ravel()
            if values.size != self.size:
                raise ValueError(
                    f"value vector has {values.size} elements, layout requires {self.size}"
                )
            self.values = values.copy()

    @classmethod
    def zeros_like(cls, other: "ParamStore") -> "ParamStore":
        return cls(other.layout)

    def get(self, name: str) -> Array:
        off, size, shape = self._offsets[name]
        return self.values[off : off + size].reshape(shape)

    def set(self, name: str, arr) -> None:
        off, size, shape = self._offsets[name]
        arr = _as_f64(arr)
        if arr.shape != shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} != {shape}")
        self.values[off : off + size] = arr.ravel()

    def slice_of(self, name: str) -> slice:
        off, size, _ = self._offsets[name]
        return slice(off, off + size)

    def as_dict(self) -> dict[str, Array]:
        return {name: self.get(name) for name, _ in self.layout}

    def copy(self) -> "ParamStore":
        return ParamStore(self.layout, self.values)

    def names(self) -> list[str]:
        return [n for n, _ in self.layout]


# ---------------------------------------------------------------------------
# Forward mode: Dual
# ---------------------------------------------------------------------------


class Dual:
    """Value/tangent pair. A zero-tangent Dual behaves like a plain array."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent=None):
        self.primal = _as_f64(primal)
        if tangent is None:
            self.tangent = np.zeros_like(self.primal)
        else:
            self.tangent = _as_f64(tangent)
            if self.tangent.shape != self.primal.shape:
                raise ValueError("tangent shape must match primal shape")

    def __repr__(self):
        return f"Dual(primal={self.primal!r}, tangent={self.tangent!r})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (Dual, Node)):
            raise UnsupportedPrimitiveError("div", "division only by constants")
        c = _as_f64(other)
        return Dual(self.primal / c, self.tangent / c)

    def __pow__(self, other):
        raise UnsupportedPrimitiveError("pow", "use square() or repeated mul")


# ---------------------------------------------------------------------------
# Reverse mode: Tape and Node
# ---------------------------------------------------------------------------


class _TapeNode:
    __slots__ = ("op", "parents", "value", "ctx", "name")

    def __init__(self, op: str, parents: tuple[int, ...], value: Array, ctx, name: str | None):
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx
        self.name = name


class Node:
    """Handle to one tape entry; supports the same operators as Dual."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.idx].value

    def __repr__(self):
        n = self.tape.nodes[self.idx]
        return f"Node(idx={self.idx}, op={n.op}, shape={n.value.shape})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (Dual, Node)):
            raise UnsupportedPrimitiveError("div", "division only by constants")
        return mul(self, 1.0 / _as_f64(other))

    def __pow__(self, other):
        raise UnsupportedPrimitiveError("pow", "use square() or repeated mul")


class Tape:
    """Append-only record of primitive ops, replayable and differentiable.

    Appending order is a topological order of the graph, so the backward
    pass is a single reversed sweep visiting each node exactly once.
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []

    def leaf(self, value, name: str | None = None) -> Node:
        return self._record("leaf", (), _as_f64(value), None, name)

    def _record(self, op, parents, value, ctx, name=None) -> Node:
        self.nodes.append(_TapeNode(op, parents, value, ctx, name))
        return Node(self, len(self.nodes) - 1)

    def node_label(self, idx: int) -> str:
        n = self.nodes[idx]
        return n.name if n.name else f"{n.op}#{idx}"

    def first_nonfinite(self) -> str | None:
        for i, n in enumerate(self.nodes):
            if not np.all(np.isfinite(n.value)):
                return self.node_label(i)
        return None

    # -- replay ------------------------------------------------------------

    def replay(self) -> None:
        """Recompute every node value from its parents, in place.

        Raises if any recomputed value differs bit-for-bit from the stored
        one; used to verify tape integrity.
        """
        for i, n in enumerate(self.nodes):
            if n.op == "leaf":
                continue
            val = self._recompute(n)
            if not np.array_equal(val, n.value):
                raise AutodiffError(f"replay mismatch at {self.node_label(i)}")

    def _recompute(self, n: _TapeNode) -> Array:
        vals = [self.nodes[p].value for p in n.parents]
        op, ctx = n.op, n.ctx
        if op == "add":
            a, b = ctx
            return (vals[0] if a is None else a) + (vals[-1] if b is None else b)
        if op == "sub":
            a, b = ctx
            return (vals[0] if a is None else a) - (vals[-1] if b is None else b)
        if op == "mul":
            a, b = ctx
            return (vals[0] if a is None else a) * (vals[-1] if b is None else b)
        if op == "neg":
            return -vals[0]
        if op == "affine":
            x, w, b, _ = _affine_operands(vals, ctx)
            return x @ w + b
        if op == "tanh":
            return np.tanh(vals[0])
        if op == "silu":
            return _silu_val_deriv(vals[0])[0]
        if op == "sin":
            return np.sin(vals[0])
        if op == "cos":
            return np.cos(vals[0])
        if op == "square":
            return vals[0] * vals[0]
        if op == "sum":
            axis, keepdims, _ = ctx
            return np.sum(vals[0], axis=axis, keepdims=keepdims)
        if op == "mean":
            axis, keepdims, _ = ctx
            return np.mean(vals[0], axis=axis, keepdims=keepdims)
        if op == "concat":
            axis, parts, _ = ctx
            arrs = []
            k = 0
            for p in parts:
                if p is None:
                    arrs.append(vals[k])
                    k += 1
                else:
                    arrs.append(p)
            return np.concatenate(arrs, axis=axis)
        if op == "stop_gradient":
            return vals[0]
        raise UnsupportedPrimitiveError(n.op, "replay")

    # -- backward ----------------------------------------------------------

    def backward(self, out: Node, seed: float = 1.0) -> list[Array | None]:
        """Adjoint sweep from ``out``; returns one adjoint slot per node."""
        adj: list[Array | None] = [None] * len(self.nodes)
        adj[out.idx] = np.broadcast_to(_as_f64(seed), self.nodes[out.idx].value.shape).copy()
        for i in range(out.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            n = self.nodes[i]
            if n.op in ("leaf", "stop_gradient"):
                continue
            self._push_adjoint(n, g, adj)
        return adj

    def _accum(self, adj, idx, contribution):
        if adj[idx] is None:
            adj[idx] = contribution.copy() if isinstance(contribution, np.ndarray) else contribution
        else:
            adj[idx] = adj[idx] + contribution

    def _push_adjoint(self, n: _TapeNode, g: Array, adj) -> None:
        op, ctx = n.op, n.ctx
        vals = [self.nodes[p].value for p in n.parents]
        if op == "add":
            a, b = ctx
            k = 0
            if a is None:
                self._accum(adj, n.parents[k], _unbroadcast(g, vals[k].shape))
                k += 1
            if b is None:
                self._accum(adj, n.parents[k], _unbroadcast(g, vals[k].shape))
        elif op == "sub":
            a, b = ctx
            k = 0
            if a is None:
                self._accum(adj, n.parents[k], _unbroadcast(g, vals[k].shape))
                k += 1
            if b is None:
                self._accum(adj, n.parents[k], _unbroadcast(-g, vals[k].shape))
        elif op == "mul":
            a, b = ctx
            k = 0
            if a is None:
                bv = vals[-1] if b is None else b
                self._accum(adj, n.parents[k], _unbroadcast(g * bv, vals[k].shape))
                k += 1
            if b is None:
                av = vals[0] if a is None else a
                self._accum(adj, n.parents[k], _unbroadcast(g * av, vals[k].shape))
        elif op == "neg":
            self._accum(adj, n.parents[0], -g)
        elif op == "affine":
            x, w, b, which = _affine_operands(vals, ctx)
            k = 0
            if which[0]:
                self._accum(adj, n.parents[k], g @ w.T)
                k += 1
            if which[1]:
                self._accum(adj, n.parents[k], x.T @ g)
                k += 1
            if which[2]:
                self._accum(adj, n.parents[k], g.sum(axis=0))
        elif op == "tanh":
            y = n.value
            self._accum(adj, n.parents[0], g * (1.0 - y * y))
        elif op == "silu":
            _, d = _silu_val_deriv(vals[0])
            self._accum(adj, n.parents[0], g * d)
        elif op == "sin":
            self._accum(adj, n.parents[0], g * np.cos(vals[0]))
        elif op == "cos":
            self._accum(adj, n.parents[0], -g * np.sin(vals[0]))
        elif op == "square":
            self._accum(adj, n.parents[0], 2.0 * vals[0] * g)
        elif op == "sum":
            axis, keepdims, shape = ctx
            self._accum(adj, n.parents[0], _spread(g, axis, keepdims, shape))
        elif op == "mean":
            axis, keepdims, shape = ctx
            count = _reduce_count(shape, axis)
            self._accum(adj, n.parents[0], _spread(g, axis, keepdims, shape) / count)
        elif op == "concat":
            axis, parts, sizes = ctx
            splits = np.cumsum(sizes[:-1])
            pieces = np.split(g, splits, axis=axis)
            k = 0
            for p, piece in zip(parts, pieces):
                if p is None:
                    self._accum(adj, n.parents[k], piece)
                    k += 1
        else:
            raise UnsupportedPrimitiveError(op, "backward")


def _reduce_count(shape, axis) -> float:
    if axis is None:
        return float(np.prod(shape)) if shape else 1.0
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return float(np.prod([shape[a] for a in axes]))


def _spread(g: Array, axis, keepdims: bool, shape: tuple[int, ...]) -> Array:
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape).copy()


def _affine_operands(vals, ctx):
    """Resolve (x, w, b) arrays for an affine node from parents + constants."""
    cx, cw, cb = ctx
    which = (cx is None, cw is None, cb is None)
    k = 0
    if which[0]:
        x = vals[k]
        k += 1
    else:
        x = cx
    if which[1]:
        w = vals[k]
        k += 1
    else:
        w = cw
    b = vals[k] if which[2] else cb
    return x, w, b, which


# ---------------------------------------------------------------------------
# Primitive ops with type dispatch
# ---------------------------------------------------------------------------


def val(x) -> Array:
    """Raw primal value of any supported operand."""
    if isinstance(x, Dual):
        return x.primal
    if isinstance(x, Node):
        return x.value
    return _as_f64(x)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise AutodiffError("operands recorded on different tapes")
    return tape


def _check_no_mix(*args):
    has_dual = any(isinstance(a, Dual) for a in args)
    has_node = any(isinstance(a, Node) for a in args)
    if has_dual and has_node:
        raise UnsupportedPrimitiveError("mixed", "cannot mix Dual and Node operands")


def _tangent_or_zero(x, like: Array) -> Array:
    if isinstance(x, Dual):
        return x.tangent
    return np.zeros_like(like)


def add(a, b):
    _check_no_mix(a, b)
    if isinstance(a, Node) or isinstance(b, Node):
        tape = _tape_of(a, b)
        parents, ctx = _binary_ctx(a, b)
        out = val(a) + val(b)
        return tape._record("add", parents, out, ctx)
    if isinstance(a, Dual) or isinstance(b, Dual):
        pa, pb = val(a), val(b)
        out = pa + pb
        ta = _tangent_or_zero(a, pa)
        tb = _tangent_or_zero(b, pb)
        return Dual(out, np.broadcast_to(ta, out.shape) + np.broadcast_to(tb, out.shape))
    return _as_f64(a) + _as_f64(b)


def sub(a, b):
    _check_no_mix(a, b)
    if isinstance(a, Node) or isinstance(b, Node):
        tape = _tape_of(a, b)
        parents, ctx = _binary_ctx(a, b)
        out = val(a) - val(b)
        return tape._record("sub", parents, out, ctx)
    if isinstance(a, Dual) or isinstance(b, Dual):
        pa, pb = val(a), val(b)
        out = pa - pb
        ta = _tangent_or_zero(a, pa)
        tb = _tangent_or_zero(b, pb)
        return Dual(out, np.broadcast_to(ta, out.shape) - np.broadcast_to(tb, out.shape))
    return _as_f64(a) - _as_f64(b)


def mul(a, b):
    _check_no_mix(a, b)
    if isinstance(a, Node) or isinstance(b, Node):
        tape = _tape_of(a, b)
        parents, ctx = _binary_ctx(a, b)
        out = val(a) * val(b)
        return tape._record("mul", parents, out, ctx)
    if isinstance(a, Dual) or isinstance(b, Dual):
        pa, pb = val(a), val(b)
        out = pa * pb
        ta = _tangent_or_zero(a, pa)
        tb = _tangent_or_zero(b, pb)
        return Dual(out, ta * pb + pa * tb)
    return _as_f64(a) * _as_f64(b)


def _binary_ctx(a, b):
    parents = []
    ca = cb = None
    if isinstance(a, Node):
        parents.append(a.idx)
    else:
        ca = val(a)
    if isinstance(b, Node):
        parents.append(b.idx)
    else:
        cb = val(b)
    return tuple(parents), (ca, cb)


def neg(a):
    if isinstance(a, Node):
        return a.tape._record("neg", (a.idx,), -a.value, None)
    if isinstance(a, Dual):
        return Dual(-a.primal, -a.tangent)
    return -_as_f64(a)


def affine(x, w, b):
    """x @ w + b for x (K, n), w (n, m), b (m,)."""
    _check_no_mix(x, w, b)
    if any(isinstance(v, Node) for v in (x, w, b)):
        tape = _tape_of(x, w, b)
        parents = tuple(v.idx for v in (x, w, b) if isinstance(v, Node))
        ctx = tuple(None if isinstance(v, Node) else val(v) for v in (x, w, b))
        out = val(x) @ val(w) + val(b)
        return tape._record("affine", parents, out, ctx)
    if any(isinstance(v, Dual) for v in (x, w, b)):
        px, pw, pb = val(x), val(w), val(b)
        out = px @ pw + pb
        tan = np.zeros_like(out)
        if isinstance(x, Dual):
            tan = tan + x.tangent @ pw
        if isinstance(w, Dual):
            tan = tan + px @ w.tangent
        if isinstance(b, Dual):
            tan = tan + b.tangent
        return Dual(out, tan)
    return _as_f64(x) @ _as_f64(w) + _as_f64(b)


def _unary(op: str, a, fval: Callable[[Array], Array], ftan: Callable[[Array, Array], Array]):
    if isinstance(a, Node):
        return a.tape._record(op, (a.idx,), fval(a.value), None)
    if isinstance(a, Dual):
        p = a.primal
        return Dual(fval(p), ftan(p, a.tangent))
    return fval(_as_f64(a))


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda p, t: (1.0 - np.tanh(p) ** 2) * t)


def silu(a):
    return _unary(
        "silu", a, lambda p: _silu_val_deriv(p)[0], lambda p, t: _silu_val_deriv(p)[1] * t
    )


def sin(a):
    return _unary("sin", a, np.sin, lambda p, t: np.cos(p) * t)


def cos(a):
    return _unary("cos", a, np.cos, lambda p, t: -np.sin(p) * t)


def square(a):
    return _unary("square", a, lambda p: p * p, lambda p, t: 2.0 * p * t)


def vsum(a, axis=None, keepdims=False):
    if isinstance(a, Node):
        ctx = (axis, keepdims, a.value.shape)
        return a.tape._record("sum", (a.idx,), np.sum(a.value, axis=axis, keepdims=keepdims), ctx)
    if isinstance(a, Dual):
        return Dual(
            np.sum(a.primal, axis=axis, keepdims=keepdims),
            np.sum(a.tangent, axis=axis, keepdims=keepdims),
        )
    return np.sum(_as_f64(a), axis=axis, keepdims=keepdims)


def vmean(a, axis=None, keepdims=False):
    if isinstance(a, Node):
        ctx = (axis, keepdims, a.value.shape)
        return a.tape._record("mean", (a.idx,), np.mean(a.value, axis=axis, keepdims=keepdims), ctx)
    if isinstance(a, Dual):
        return Dual(
            np.mean(a.primal, axis=axis, keepdims=keepdims),
            np.mean(a.tangent, axis=axis, keepdims=keepdims),
        )
    return np.mean(_as_f64(a), axis=axis, keepdims=keepdims)


def concat(parts: Iterable, axis: int = 1):
    parts = list(parts)
    _check_no_mix(*parts)
    if any(isinstance(p, Node) for p in parts):
        tape = _tape_of(*parts)
        parents = tuple(p.idx for p in parts if isinstance(p, Node))
        consts = [None if isinstance(p, Node) else val(p) for p in parts]
        vals = [val(p) for p in parts]
        sizes = tuple(v.shape[axis] for v in vals)
        out = np.concatenate(vals, axis=axis)
        return tape._record("concat", parents, out, (axis, consts, sizes))
    if any(isinstance(p, Dual) for p in parts):
        prim = [val(p) for p in parts]
        tans = [_tangent_or_zero(p, v) for p, v in zip(parts, prim)]
        return Dual(np.concatenate(prim, axis=axis), np.concatenate(tans, axis=axis))
    return np.concatenate([_as_f64(p) for p in parts], axis=axis)


def stop_gradient(a):
    """Forward the value, block adjoint and tangent flow."""
    if isinstance(a, Node):
        return a.tape._record("stop_gradient", (a.idx,), a.value, None)
    if isinstance(a, Dual):
        return Dual(a.primal, np.zeros_like(a.tangent))
    return _as_f64(a)


# ---------------------------------------------------------------------------
# High-level entry points
# ---------------------------------------------------------------------------


def jvp(f: Callable, x, v) -> tuple[Array, Array]:
    """Value and directional derivative J_f(x) @ v in one forward pass."""
    x = _as_f64(x)
    v = _as_f64(v)
    if x.shape != v.shape:
        raise ValueError(f"x and v must share a shape, got {x.shape} vs {v.shape}")
    out = f(Dual(x, v))
    if isinstance(out, Dual):
        return out.primal, out.tangent
    out = _as_f64(out)
    return out, np.zeros_like(out)


def jacobian(f: Callable, x) -> Array:
    """Exact Jacobian of f: R^d -> R^d via d forward-mode unit probes."""
    x = _as_f64(x)
    d = x.size
    cols = []
    for j in range(d):
        e = np.zeros_like(x)
        e.flat[j] = 1.0
        _, t = jvp(f, x, e)
        cols.append(np.ravel(t))
    m = len(cols[0])
    jac = np.empty((m, d), dtype=np.float64)
    for j, c in enumerate(cols):
        jac[:, j] = c
    return jac


def value_and_grad(loss: Callable[[Mapping[str, Node]], Node], params: ParamStore) -> tuple[float, Array]:
    """Evaluate ``loss`` on tape leaves built from ``params`` and return
    (scalar value, flat gradient matching the ParamStore layout)."""
    tape = Tape()
    leaves = {name: tape.leaf(params.get(name), name=name) for name in params.names()}
    out = loss(leaves)
    if not isinstance(out, Node):
        raise AutodiffError("loss must return a tape Node")
    out_val = out.value
    if out_val.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {out_val.shape}")
    if not np.all(np.isfinite(out_val)):
        culprit = tape.first_nonfinite() or "loss output"
        raise NonFiniteError(culprit)
    adj = tape.backward(out)
    g = np.zeros(params.size, dtype=np.float64)
    for name in params.names():
        a = adj[leaves[name].idx]
        if a is not None:
            g[params.slice_of(name)] = np.ravel(a)
    return float(out_val.reshape(())), g


def grad(loss: Callable[[Mapping[str, Node]], Node], params: ParamStore) -> Array:
    """Gradient of a scalar loss with respect to every parameter."""
    return value_and_grad(loss, params)[1]
