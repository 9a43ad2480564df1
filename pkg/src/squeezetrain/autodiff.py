"""Reverse-mode automatic differentiation over dense float arrays.

Expressions are immutable DAGs of primitive ops over named input slots and
constant arrays.  Shapes are fixed when an expression is built; :func:`forward`
evaluates an expression for a set of bindings and :func:`backward` returns
exact reverse-mode gradients of a scalar expression.

Evaluation runs in float32 unless a float64 array is bound, in which case the
whole evaluation is promoted to float64 (used by :func:`grad_check`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Expr", "ShapeError", "BindingError", "CheckReport",
    "slot", "index_slot", "const", "add", "sub", "mul", "scale", "bias_add",
    "matmul", "conv2d", "relu", "maxpool2d", "reshape", "logsumexp", "softmax",
    "log", "clamp_min", "gather", "max_except", "sum", "mean",
    "forward", "backward", "value_and_grad", "grad_check", "as_tensor",
]


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes violate its rule."""


class BindingError(ValueError):
    """Raised for missing, misshapen or non-finite slot bindings."""


def as_tensor(value, dtype=np.float32) -> np.ndarray:
    """Convert ``value`` to a contiguous float array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(value, dtype=dtype)
    if not np.isfinite(arr).all():
        raise ValueError("tensor contains NaN or Inf")
    return arr


class Expr:
    """A node in an expression DAG.  Treat instances as immutable."""

    __slots__ = ("op", "inputs", "attrs", "shape", "_order", "__weakref__")

    def __init__(self, op: str, inputs: tuple[Expr, ...], shape: tuple[int, ...], attrs=None):
        self.op = op
        self.inputs = inputs
        self.shape = tuple(int(d) for d in shape)
        self.attrs = attrs or {}
        self._order = None

    @property
    def name(self) -> str | None:
        return self.attrs.get("name")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Expr({self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Expr):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def slots(self) -> dict[str, Expr]:
        """All slot nodes reachable from this expression, by name."""
        return {n.name: n for n in _topo(self) if n.op == "slot"}


# ---------------------------------------------------------------------------
# Construction


def _fail(op: str, msg: str, *nodes: Expr):
    shapes = ", ".join(str(n.shape) for n in nodes)
    raise ShapeError(f"{op}: {msg} (input shapes {shapes})")


def slot(name: str, shape: Sequence[int]) -> Expr:
    """A named float input; bound at evaluation time."""
    shape = tuple(shape)
    if any(int(d) <= 0 for d in shape):
        raise ShapeError(f"slot {name!r}: dimensions must be positive, got {shape}")
    return Expr("slot", (), shape, {"name": name, "index": False})


def index_slot(name: str, length: int) -> Expr:
    """A named vector of class indices (labels); never differentiated."""
    return Expr("slot", (), (length,), {"name": name, "index": True})


def const(value) -> Expr:
    arr = as_tensor(value, dtype=np.float64)
    return Expr("const", (), arr.shape, {"value": arr})


def _same(op, a, b):
    if a.shape != b.shape:
        _fail(op, "shapes must match", a, b)


def add(a: Expr, b: Expr) -> Expr:
    _same("add", a, b)
    return Expr("add", (a, b), a.shape)


def sub(a: Expr, b: Expr) -> Expr:
    _same("sub", a, b)
    return Expr("sub", (a, b), a.shape)


def mul(a: Expr, b: Expr) -> Expr:
    _same("mul", a, b)
    return Expr("mul", (a, b), a.shape)


def scale(a: Expr, c: float) -> Expr:
    return Expr("scale", (a,), a.shape, {"c": float(c)})


def bias_add(x: Expr, b: Expr) -> Expr:
    """Add a per-channel bias along axis 1, broadcast over every other axis."""
    if len(x.shape) < 2 or b.shape != (x.shape[1],):
        _fail("bias_add", "bias must have shape (x.shape[1],)", x, b)
    return Expr("bias_add", (x, b), x.shape)


def matmul(a: Expr, b: Expr) -> Expr:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        _fail("matmul", "expected (m, k) @ (k, n)", a, b)
    return Expr("matmul", (a, b), (a.shape[0], b.shape[1]))


def conv2d(x: Expr, w: Expr, padding: int = 0) -> Expr:
    """Stride-1 cross-correlation of (N, C, H, W) input with (F, C, kh, kw) filters."""
    if len(x.shape) != 4 or len(w.shape) != 4 or x.shape[1] != w.shape[1]:
        _fail("conv2d", "expected (N, C, H, W) and (F, C, kh, kw)", x, w)
    n, _, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        _fail("conv2d", "kernel larger than padded input", x, w)
    return Expr("conv2d", (x, w), (n, f, ho, wo), {"padding": int(padding)})


def relu(x: Expr) -> Expr:
    return Expr("relu", (x,), x.shape)


def maxpool2d(x: Expr, size: int = 2) -> Expr:
    if len(x.shape) != 4 or x.shape[2] % size or x.shape[3] % size:
        _fail("maxpool2d", f"spatial dims must be divisible by {size}", x)
    n, c, h, w = x.shape
    return Expr("maxpool2d", (x,), (n, c, h // size, w // size), {"size": int(size)})


def reshape(x: Expr, shape: Sequence[int]) -> Expr:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != int(np.prod(x.shape)):
        _fail("reshape", f"cannot reshape to {shape}", x)
    return Expr("reshape", (x,), shape, {"shape": shape})


def _rows(op, x):
    if len(x.shape) != 2:
        _fail(op, "expected a 2-D (rows, classes) input", x)


def logsumexp(x: Expr) -> Expr:
    """Row-wise log-sum-exp of a 2-D input, shape (rows,)."""
    _rows("logsumexp", x)
    return Expr("logsumexp", (x,), (x.shape[0],))


def softmax(x: Expr) -> Expr:
    _rows("softmax", x)
    return Expr("softmax", (x,), x.shape)


def log(x: Expr) -> Expr:
    return Expr("log", (x,), x.shape)


def clamp_min(x: Expr, floor: float) -> Expr:
    return Expr("clamp_min", (x,), x.shape, {"floor": float(floor)})


def _check_index(op, x, idx):
    _rows(op, x)
    if not (idx.op == "slot" and idx.attrs["index"]) or idx.shape != (x.shape[0],):
        _fail(op, "index must be an index_slot with one entry per row", x, idx)


def gather(x: Expr, idx: Expr) -> Expr:
    """Pick ``x[r, idx[r]]`` for every row ``r``."""
    _check_index("gather", x, idx)
    return Expr("gather", (x, idx), (x.shape[0],))


def max_except(x: Expr, idx: Expr) -> Expr:
    """Row-wise maximum over all columns except ``idx[r]``."""
    _check_index("max_except", x, idx)
    if x.shape[1] < 2:
        _fail("max_except", "need at least two columns", x)
    return Expr("max_except", (x, idx), (x.shape[0],))


def sum(x: Expr, axis: int | None = None) -> Expr:  # noqa: A001 - mirrors numpy
    if axis is None:
        return Expr("sum", (x,), (), {"axis": None})
    if axis != -1 or len(x.shape) != 2:
        _fail("sum", "only full reduction or axis=-1 on 2-D input", x)
    return Expr("sum", (x,), (x.shape[0],), {"axis": -1})


def mean(x: Expr) -> Expr:
    return Expr("mean", (x,), ())


# ---------------------------------------------------------------------------
# Forward rules: f(attrs, *values) -> (out, ctx)


def _f_conv2d(attrs, x, w):
    p = attrs["padding"]
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    f, c, kh, kw = w.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    n, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = w.reshape(f, -1) @ cols  # n, f, ho*wo
    return out.reshape(n, f, ho, wo), cols


def _f_maxpool(attrs, x):
    s = attrs["size"]
    members = [x[:, :, i::s, j::s] for i in range(s) for j in range(s)]
    out = members[0]
    for m in members[1:]:
        out = np.maximum(out, m)
    # scan in reverse so the first maximum in row-major window order wins
    arg = np.full(out.shape, s * s - 1, dtype=np.int16)
    for k in range(s * s - 2, -1, -1):
        arg[members[k] == out] = k
    return out, arg


def _f_lse(attrs, x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    return (m + np.log(s))[:, 0], e / s


def _f_softmax(attrs, x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True), None


def _f_max_except(attrs, x, idx):
    masked = x.copy()
    masked[np.arange(x.shape[0]), idx] = -np.inf
    arg = masked.argmax(axis=1)
    return masked[np.arange(x.shape[0]), arg], arg


def _f_sum(attrs, x):
    if attrs["axis"] is None:
        return np.asarray(x.sum(), dtype=x.dtype), None
    return x.sum(axis=1), None


_FORWARD: dict[str, Callable] = {
    "add": lambda a, x, y: (x + y, None),
    "sub": lambda a, x, y: (x - y, None),
    "mul": lambda a, x, y: (x * y, None),
    "scale": lambda a, x: (x * x.dtype.type(a["c"]), None),
    "bias_add": lambda a, x, b: (x + b.reshape((1, -1) + (1,) * (x.ndim - 2)), None),
    "matmul": lambda a, x, y: (x @ y, None),
    "conv2d": _f_conv2d,
    "relu": lambda a, x: (np.maximum(x, 0), None),
    "maxpool2d": _f_maxpool,
    "reshape": lambda a, x: (x.reshape(a["shape"]), None),
    "logsumexp": _f_lse,
    "softmax": _f_softmax,
    "log": lambda a, x: (np.log(x), None),
    "clamp_min": lambda a, x: (np.maximum(x, x.dtype.type(a["floor"])), None),
    "gather": lambda a, x, i: (x[np.arange(x.shape[0]), i], None),
    "max_except": _f_max_except,
    "sum": _f_sum,
    "mean": lambda a, x: (np.asarray(x.mean(), dtype=x.dtype), None),
}


# ---------------------------------------------------------------------------
# Vector-Jacobian rules: vjp(attrs, g, out, ctx, *values) -> tuple of input grads


def _b_conv2d(attrs, g, out, cols, x, w):
    p = attrs["padding"]
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    g2 = g.reshape(n, f, ho * wo)
    gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    dcols = (w.reshape(f, -1).T @ g2).reshape(n, c, kh, kw, ho, wo)
    gx = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
    if p:
        gx = gx[:, :, p:-p, p:-p]
    return gx, gw


def _b_maxpool(attrs, g, out, arg, x):
    s = attrs["size"]
    gx = np.zeros_like(x, dtype=g.dtype)
    for k in range(s * s):
        np.copyto(gx[:, :, k // s::s, k % s::s], g, where=arg == k)
    return (gx,)


def _b_softmax(attrs, g, s, ctx, x):
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


def _b_pick(attrs, g, out, arg, x, idx):
    # gather and max_except both route the row gradient to a single column
    col = idx if arg is None else arg
    gx = np.zeros_like(x)
    gx[np.arange(x.shape[0]), col] = g
    return gx, None


def _b_sum(attrs, g, out, ctx, x):
    if attrs["axis"] is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.repeat(g[:, None], x.shape[1], axis=1),)


_VJP: dict[str, Callable] = {
    "add": lambda a, g, o, c, x, y: (g, g),
    "sub": lambda a, g, o, c, x, y: (g, -g),
    "mul": lambda a, g, o, c, x, y: (g * y, g * x),
    "scale": lambda a, g, o, c, x: (g * g.dtype.type(a["c"]),),
    "bias_add": lambda a, g, o, c, x, b: (g, g.sum(axis=tuple(i for i in range(g.ndim) if i != 1))),
    "matmul": lambda a, g, o, c, x, y: (g @ y.T, x.T @ g),
    "conv2d": _b_conv2d,
    "relu": lambda a, g, o, c, x: (g * (x > 0),),
    "maxpool2d": _b_maxpool,
    "reshape": lambda a, g, o, c, x: (g.reshape(x.shape),),
    "logsumexp": lambda a, g, o, probs, x: (g[:, None] * probs,),
    "softmax": _b_softmax,
    "log": lambda a, g, o, c, x: (g / x,),
    "clamp_min": lambda a, g, o, c, x: (g * (x > x.dtype.type(a["floor"])),),
    "gather": _b_pick,
    "max_except": _b_pick,
    "sum": _b_sum,
    "mean": lambda a, g, o, c, x: (np.full(x.shape, g / x.size, dtype=g.dtype),),
}


# ---------------------------------------------------------------------------
# Evaluation


def _topo(root: Expr) -> list[Expr]:
    if root._order is not None:
        return root._order
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in reversed(node.inputs):
            if id(child) not in seen:
                stack.append((child, False))
    root._order = order
    return order


def _dtype(bindings: Mapping[str, np.ndarray]):
    for v in bindings.values():
        if getattr(v, "dtype", None) == np.float64:
            return np.float64
    return np.float32


def _bind(node: Expr, bindings, dtype):
    name = node.name
    if name not in bindings:
        raise BindingError(f"unbound slot {name!r}")
    value = np.asarray(bindings[name])
    if value.shape != node.shape:
        raise BindingError(f"slot {name!r} expects shape {node.shape}, got {value.shape}")
    if node.attrs["index"]:
        if value.dtype.kind not in "iu":
            raise BindingError(f"index slot {name!r} needs integer values")
        return value.astype(np.intp, copy=False)
    value = value.astype(dtype, copy=False)
    if not np.isfinite(value).all():
        raise BindingError(f"slot {name!r} contains NaN or Inf")
    return value


def _check_labels(node, vals):
    x, idx = (vals[id(n)] for n in node.inputs)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"{node.op}: label out of range for {x.shape[1]} classes")


def _evaluate(roots: Sequence[Expr], bindings, dtype=None):
    dtype = dtype or _dtype(bindings)
    vals, ctxs = {}, {}
    for root in roots:
        for node in _topo(root):
            key = id(node)
            if key in vals:
                continue
            if node.op == "slot":
                vals[key] = _bind(node, bindings, dtype)
            elif node.op == "const":
                vals[key] = node.attrs["value"].astype(dtype)
            else:
                if node.op in ("gather", "max_except"):
                    _check_labels(node, vals)
                args = [vals[id(n)] for n in node.inputs]
                vals[key], ctxs[key] = _FORWARD[node.op](node.attrs, *args)
    return vals, ctxs


def forward(expr: Expr | Sequence[Expr], bindings: Mapping[str, np.ndarray]):
    """Evaluate one expression (or a sequence, sharing work) under ``bindings``."""
    if isinstance(expr, Expr):
        vals, _ = _evaluate([expr], bindings)
        return vals[id(expr)]
    vals, _ = _evaluate(list(expr), bindings)
    return tuple(vals[id(e)] for e in expr)


def value_and_grad(expr: Expr, bindings, wrt: Iterable[str], aux: Sequence[Expr] = ()):
    """Return ``(value, grads, aux_values)`` for a scalar ``expr``.

    ``grads`` maps every name in ``wrt`` to an array shaped like its slot.
    ``aux`` expressions are evaluated in the same pass.
    """
    wrt = set(wrt)
    if not wrt:
        raise ValueError("wrt must name at least one slot")
    if expr.shape != ():
        raise ShapeError(f"backward needs a scalar root, got shape {expr.shape}")
    order = _topo(expr)
    slots = {n.name: n for n in order if n.op == "slot"}
    for name in wrt:
        if name not in slots:
            raise BindingError(f"slot {name!r} does not appear in the expression")
        if slots[name].attrs["index"]:
            raise BindingError(f"cannot differentiate index slot {name!r}")
    vals, ctxs = _evaluate([expr, *aux], bindings)

    needs = set()
    for node in order:
        if (node.op == "slot" and node.name in wrt) or any(id(i) in needs for i in node.inputs):
            needs.add(id(node))

    root_val = vals[id(expr)]
    grads = {id(expr): np.ones((), dtype=root_val.dtype)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        key = id(node)
        if key not in needs or key not in grads:
            continue
        g = grads.pop(key)
        if node.op == "slot":
            out[node.name] = out[node.name] + g if node.name in out else g
            continue
        args = [vals[id(n)] for n in node.inputs]
        in_grads = _VJP[node.op](node.attrs, g, vals[key], ctxs.get(key), *args)
        for child, cg in zip(node.inputs, in_grads):
            if cg is None or id(child) not in needs:
                continue
            ck = id(child)
            grads[ck] = grads[ck] + cg if ck in grads else cg
    for name in wrt:
        if name not in out:
            out[name] = np.zeros(slots[name].shape, dtype=root_val.dtype)
        out[name] = np.ascontiguousarray(out[name], dtype=root_val.dtype).reshape(slots[name].shape)
    return root_val, out, tuple(vals[id(a)] for a in aux)


def backward(expr: Expr, bindings, wrt: Iterable[str]) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of scalar ``expr`` w.r.t. the slots in ``wrt``."""
    return value_and_grad(expr, bindings, wrt)[1]


@dataclass
class CheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def grad_check(expr: Expr, bindings, wrt: Iterable[str], h: float = 1e-3,
               tol: float = 1e-4, max_coords: int | None = None, seed: int = 0) -> CheckReport:
    """Compare :func:`backward` against central finite differences.

    Both sides run in float64.  The error for a slot is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
    checked coordinates.  ``max_coords`` samples coordinates per slot.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    wrt = sorted(set(wrt))
    b64 = {k: (np.asarray(v, dtype=np.float64) if np.asarray(v).dtype.kind == "f" else v)
           for k, v in bindings.items()}
    analytic = backward(expr, b64, wrt)
    rng = np.random.default_rng(seed)
    report = CheckReport(tol=tol)
    for name in wrt:
        base = b64[name]
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for k, c in enumerate(coords):
            vals = []
            for step in (h, -h):
                bumped = base.copy().reshape(-1)
                bumped[c] += step
                vals.append(float(forward(expr, {**b64, name: bumped.reshape(base.shape)})))
            numeric[k] = (vals[0] - vals[1]) / (2 * h)
        a = analytic[name].reshape(-1)[coords]
        denom = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(a - numeric).max(initial=0.0)
        report.errors[name] = 0.0 if denom == 0 else float(diff / denom)
    return report
