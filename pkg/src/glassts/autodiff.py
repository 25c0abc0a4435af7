"""Reverse-mode differentiation on dense float64 tensors.

Everything in this package that needs a gradient runs through here: ops
applied while a :class:`Tape` is active are recorded and can be replayed
backwards to get exact vector-Jacobian products. Without an active tape the
same ops run forward-only, which is the cheap inference path.

Design constraints baked in:

* float64 everywhere; gradient-check tolerances assume it.
* ``exp`` clamps its argument to [-30, 30] (the raw input is kept on the
  node for diagnostics) so kernel feature maps cannot overflow.
* softmax subtracts the row max before exponentiating.
* backward accumulates in reverse node-id order, so results are
  reproducible bit for bit.
* every op validates shapes up front and rejects non-finite outputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "AutodiffError",
    "ShapeMismatch",
    "NumericsError",
    "tensor",
    "apply_primitive",
    "primitive_kinds",
    "finite_difference_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "absval",
    "clip",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "softmax",
    "sum_",
    "mean_",
    "concat",
    "reshape",
    "transpose",
    "slice_",
]

EXP_CLAMP = 30.0


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NumericsError(AutodiffError):
    pass


class Tensor:
    """Immutable dense array plus the bookkeeping needed for tracking.

    The wrapped ndarray must never be written in place once the tensor
    exists; optimizers swap in a fresh array instead of mutating, so nodes
    recorded on an older tape keep seeing the values they were built from.
    """

    __slots__ = ("data", "requires_grad", "_tape", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor created with non-finite entries")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._nid = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "input_ids", "out_id", "vjp", "push")

    def __init__(self, kind, input_ids, out_id, vjp, push):
        self.kind = kind
        self.input_ids = input_ids
        self.out_id = out_id
        self.vjp = vjp  # adjoint -> tuple of input gradients (None where skipped)
        self.push = push  # per-input bool: does that input need a gradient


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications (the computation record).

    Node ids are assigned in execution order, so the list is topologically
    sorted by construction. A tape can be replayed backwards repeatedly,
    from different scalar roots.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def node_kinds(self) -> list:
        return [n.kind for n in self._nodes if n.kind != "leaf"]

    def _fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _adopt(self, t: Tensor) -> int:
        """Register a tensor as a leaf of this tape if it is not already on it."""
        if t._tape is not self:
            t._tape = self
            t._nid = self._fresh_id()
        return t._nid

    def _record(self, kind, inputs, out: Tensor, vjp, push) -> None:
        ids = tuple(self._adopt(t) for t in inputs)
        out._tape = self
        out._nid = self._fresh_id()
        self._nodes.append(_Node(kind, ids, out._nid, vjp, push))

    def backward(self, loss: Tensor) -> "Gradients":
        """Accumulate adjoints from a scalar loss back to every leaf.

        The tape is not consumed; calling backward again (same or different
        scalar node) recomputes from scratch.
        """
        if loss._tape is not self:
            raise AutodiffError("loss tensor was not computed on this tape")
        if loss.data.size != 1:
            raise ShapeMismatch(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        adjoints: dict[int, np.ndarray] = {
            loss._nid: np.ones_like(loss.data)
        }
        for node in reversed(self._nodes):
            out_adj = adjoints.get(node.out_id)
            if out_adj is None or not any(node.push):
                continue
            grads = node.vjp(out_adj)
            for i, (nid, g) in enumerate(zip(node.input_ids, grads)):
                if g is None or not node.push[i]:
                    continue
                prev = adjoints.get(nid)
                if prev is None:
                    adjoints[nid] = g
                else:
                    adjoints[nid] = prev + g
        return Gradients(self, adjoints)


class Gradients:
    """Gradient per node, keyed back through the tensors that produced them."""

    def __init__(self, tape: Tape, adjoints: dict):
        self._tape = tape
        self._adjoints = adjoints

    def wrt(self, t: Tensor) -> np.ndarray:
        if t._tape is not self._tape:
            raise AutodiffError("tensor does not belong to the differentiated tape")
        g = self._adjoints.get(t._nid)
        if g is None:
            return np.zeros_like(t.data)
        return g


def _active() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _finish(kind, inputs, out_data, vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericsError(f"{kind}: non-finite output")
    req = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = req
    out._tape = None
    out._nid = -1
    tape = _active()
    if tape is not None:
        push = tuple(t.requires_grad for t in inputs)
        tape._record(kind, inputs, out, vjp, push)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(
            f"{kind}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finish("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _finish("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _finish("mul", (a, b), out, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _finish("div", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    a = _lift(a)

    def vjp(g):
        return (-g,)

    return _finish("neg", (a,), -a.data, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D operands or stacked 3-D batches.

    Batched x batched requires equal batch sizes; a 2-D operand against a
    batched one broadcasts across the batch (its gradient sums over it).
    1-D operands are not accepted: keep vectors as explicit rows/columns.
    """
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    ok = (
        ad.ndim >= 2
        and bd.ndim >= 2
        and ad.shape[-1] == bd.shape[-2]
        and (
            ad.ndim == 2
            or bd.ndim == 2
            or ad.shape[:-2] == bd.shape[:-2]
        )
    )
    if not ok:
        raise ShapeMismatch(f"matmul: shapes {ad.shape} and {bd.shape} incompatible")
    out = ad @ bd

    def vjp(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        if ga.ndim > ad.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
        if gb.ndim > bd.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
        return ga, gb

    return _finish("matmul", (a, b), out, vjp)


def exp(a: Tensor) -> Tensor:
    """Exponential with the argument clamped to +/-EXP_CLAMP.

    Outside the clamp window the true forward value would overflow float64
    long before +/-709, so the clamp acts as a saturation with zero slope.
    """
    a = _lift(a)
    raw = a.data  # pre-clamp values, kept for the backward mask / diagnostics
    out = np.exp(np.clip(raw, -EXP_CLAMP, EXP_CLAMP))

    def vjp(g):
        inside = (raw > -EXP_CLAMP) & (raw < EXP_CLAMP)
        return (g * out * inside,)

    return _finish("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _finish("log", (a,), out, vjp)


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _finish("sqrt", (a,), out, vjp)


def absval(a: Tensor) -> Tensor:
    a = _lift(a)
    ad = a.data

    def vjp(g):
        return (g * np.sign(ad),)

    return _finish("abs", (a,), np.abs(ad), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    ad = a.data
    out = np.clip(ad, lo, hi)

    def vjp(g):
        return (g * ((ad > lo) & (ad < hi)),)

    return _finish("clip", (a,), out, vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ea = np.exp(ad[~pos])
    out[~pos] = ea / (1.0 + ea)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", (a,), out, vjp)


def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _finish("tanh", (a,), out, vjp)


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    ad = a.data

    def vjp(g):
        return (g * (ad > 0),)

    return _finish("relu", (a,), np.maximum(ad, 0.0), vjp)


def softplus(a: Tensor) -> Tensor:
    a = _lift(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)

    def vjp(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        ea = np.exp(ad[~pos])
        s[~pos] = ea / (1.0 + ea)
        return (g * s,)

    return _finish("softplus", (a,), out, vjp)


def softmax(a: Tensor, axis: int) -> Tensor:
    a = _lift(a)
    ad = a.data
    if not -ad.ndim <= axis < ad.ndim:
        raise ShapeMismatch(f"softmax: axis {axis} out of range for shape {ad.shape}")
    shifted = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _finish("softmax", (a,), out, vjp)


def _reduce(kind, a, axis, keepdims, np_fn, scale_back):
    a = _lift(a)
    ad = a.data
    out = np_fn(ad, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float64)

    def vjp(g):
        if axis is None:
            grad = np.broadcast_to(g.reshape(()), ad.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = g
            if not keepdims:
                for ax in sorted(ax % ad.ndim for ax in axes):
                    gg = np.expand_dims(gg, ax)
            grad = np.broadcast_to(gg, ad.shape)
        return (grad * scale_back,)

    return _finish(kind, (a,), out, vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce("sum", a, axis, keepdims, np.sum, 1.0)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return _reduce("mean", a, axis, keepdims, np.mean, 1.0 / count)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat: empty input list")
    shapes = [p.data.shape for p in parts]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(
            i != axis % len(base) and s[i] != base[i] for i in range(len(base))
        ):
            raise ShapeMismatch(f"concat: shapes {shapes} incompatible on axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _finish("concat", tuple(parts), out, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {old} as {shape}") from None

    def vjp(g):
        return (g.reshape(old),)

    return _finish("reshape", (a,), out, vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _finish("transpose", (a,), out, vjp)


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing: a tuple of ints and slices (no fancy indexing)."""
    a = _lift(a)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, slice)):
            raise ShapeMismatch(f"slice: unsupported index {k!r}")
    out = a.data[key]
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _finish("slice", (a,), np.ascontiguousarray(out), vjp)


# ---------------------------------------------------------------------------
# dispatch by kind

_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": absval,
    "clip": clip,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "softmax": softmax,
    "sum": sum_,
    "mean": mean_,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
}


def primitive_kinds() -> list:
    return sorted(_PRIMITIVES)


def apply_primitive(kind: str, *inputs, **params) -> Tensor:
    """Apply a primitive by name. Unknown kinds are rejected."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise AutodiffError(f"unknown primitive kind {kind!r}")
    if kind == "concat":
        return fn(list(inputs), **params)
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# validation oracle


def finite_difference_check(f, point: Tensor, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar function against central
    differences, coordinate by coordinate.

    Returns max over coordinates of |analytic - numeric| divided by
    (|analytic| + |numeric| + 1e-12).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    base = np.array(point.data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeMismatch("finite_difference_check needs a scalar-valued function")
    analytic = tape.backward(y).wrt(x).ravel()

    flat = base.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base)).item()
        flat[i] = orig - eps
        lo = f(Tensor(base)).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericsError("non-finite function value during finite differences")
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
