"""Dense float64 tensors with a recording tape and reverse-mode gradients.

A :class:`Tape` records primitive operations as they are applied (define-by-run).
Values are computed eagerly when every input has a value; leaves declared with
only a shape defer computation until :func:`evaluate` binds them.

Broadcasting is limited to the leading-batch rule: in ``add``/``mul``/``matmul``
the lower-rank operand's shape must equal a trailing suffix of the other's.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "Var",
    "evaluate",
    "backward",
    "node_grads",
    "finite_diff_grad",
    "frobenius_norm_sq",
]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


class TapeError(ValueError):
    """Raised for shape mismatches, non-finite values and misuse of a tape."""

    def __init__(self, message: str, node_id: int | None = None):
        self.node_id = node_id
        if node_id is not None:
            message = f"node {node_id}: {message}"
        super().__init__(message)


@dataclass
class Tensor:
    data: np.ndarray
    requires_grad: bool = False

    def __post_init__(self):
        self.data = np.array(self.data, dtype=np.float64)
        if not np.isfinite(self.data).all():
            raise TapeError("tensor contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data


# --------------------------------------------------------------------------
# primitive definitions: shape rule, forward, vector-Jacobian product
# --------------------------------------------------------------------------


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _ew_shape(shapes, attrs):
    a, b = shapes
    if a == b or _is_suffix(b, a):
        return a
    if _is_suffix(a, b):
        return b
    raise ValueError(f"incompatible shapes {a} and {b}")


def _matmul_shape(shapes, attrs):
    a, b = shapes
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"matmul needs rank >= 2, got {a} and {b}")
    if a[-1] != b[-2]:
        raise ValueError(f"matmul inner dims differ: {a} @ {b}")
    la, lb = a[:-2], b[:-2]
    if _is_suffix(lb, la):
        lead = la
    elif _is_suffix(la, lb):
        lead = lb
    else:
        raise ValueError(f"matmul leading dims incompatible: {a} @ {b}")
    return tuple(lead) + (a[-2], b[-1])


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _same_shape(shapes, attrs):
    return shapes[0]


# tanh form of GELU; twice as fast as erf in numpy and smooth to all orders
def _gelu_tanh(x):
    t = x * x
    t *= _GELU_K
    t += 1.0
    t *= x
    t *= _GELU_C
    return np.tanh(t, out=t)


def _gelu(x):
    t = _gelu_tanh(x)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def _gelu_vjp(g, ins, out, attrs):
    x = ins[0]
    t = _gelu_tanh(x)
    dt = x * x
    dt *= 3.0 * _GELU_K
    dt += 1.0
    dt *= _GELU_C
    dt *= 1.0 - t * t
    dt *= x
    dt += t
    dt += 1.0
    dt *= 0.5
    dt *= g
    return (dt,)


def _matmul(ins, attrs):
    a, b = ins
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    return np.matmul(a, b)


def _matmul_vjp(g, ins, out, attrs):
    a, b = ins
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    return (_reduce_to(np.matmul(g, _swap(b)), a.shape), _reduce_to(np.matmul(_swap(a), g), b.shape))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(g, ins, out, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _layer_norm(x, attrs):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + attrs["eps"])


def _layer_norm_vjp(g, ins, out, attrs):
    x = ins[0]
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + attrs["eps"])
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * out).sum(axis=-1, keepdims=True) / n
    return (inv * (g - gm - out * gy),)


def _embedding_shape(shapes, attrs):
    (t,) = shapes
    if len(t) != 2:
        raise ValueError(f"embedding table must be 2-D, got {t}")
    ids = attrs["ids"]
    if ids.size and (ids.min() < 0 or ids.max() >= t[0]):
        raise ValueError(f"embedding id out of range for table of {t[0]} rows")
    return tuple(ids.shape) + (t[1],)


def _embedding_vjp(g, ins, out, attrs):
    table = ins[0]
    gt = np.zeros_like(table)
    np.add.at(gt, attrs["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def _xent_shape(shapes, attrs):
    (s,) = shapes
    labels = attrs["labels"]
    if len(s) != 2 or labels.shape != (s[0],):
        raise ValueError(f"cross_entropy needs logits [B, C] and labels [B], got {s}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= s[1]):
        raise ValueError("label index out of range")
    return ()


def _xent(x, attrs):
    z = x - x.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -logp[np.arange(x.shape[0]), attrs["labels"]]
    return nll.mean() if attrs["reduction"] == "mean" else nll.sum()


def _xent_vjp(g, ins, out, attrs):
    x = ins[0]
    p = _softmax(x)
    p[np.arange(x.shape[0]), attrs["labels"]] -= 1.0
    if attrs["reduction"] == "mean":
        p /= x.shape[0]
    return (g * p,)


def _reduce_shape(shapes, attrs):
    (s,) = shapes
    axis = attrs["axis"]
    if axis is None:
        return ()
    axis = axis % len(s)
    return tuple(d for i, d in enumerate(s) if i != axis)


def _sum_vjp(g, ins, out, attrs):
    x = ins[0]
    axis = attrs["axis"]
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _mean_vjp(g, ins, out, attrs):
    x = ins[0]
    axis = attrs["axis"]
    n = x.size if axis is None else x.shape[axis]
    return (_sum_vjp(g, ins, out, attrs)[0] / n,)


def _reshape_shape(shapes, attrs):
    (s,) = shapes
    new = tuple(attrs["shape"])
    if int(np.prod(s)) != int(np.prod(new)):
        raise ValueError(f"cannot reshape {s} to {new}")
    return new


def _transpose_shape(shapes, attrs):
    (s,) = shapes
    axes = attrs["axes"]
    if sorted(axes) != list(range(len(s))):
        raise ValueError(f"bad transpose axes {axes} for shape {s}")
    return tuple(s[a] for a in axes)


def _concat_shape(shapes, attrs):
    axis = attrs["axis"]
    first = shapes[0]
    axis = axis % len(first)
    for s in shapes[1:]:
        if len(s) != len(first) or any(a != b for i, (a, b) in enumerate(zip(s, first)) if i != axis):
            raise ValueError(f"concat shapes differ off-axis: {shapes}")
    out = list(first)
    out[axis] = sum(s[axis] for s in shapes)
    return tuple(out)


def _concat_vjp(g, ins, out, attrs):
    sizes = np.cumsum([x.shape[attrs["axis"]] for x in ins])[:-1]
    return tuple(np.split(g, sizes, axis=attrs["axis"]))


def _take_shape(shapes, attrs):
    (s,) = shapes
    axis = attrs["axis"] % len(s)
    idx = attrs["index"]
    if np.any(idx < 0) or np.any(idx >= s[axis]):
        raise ValueError(f"take index out of range for axis of size {s[axis]}")
    return tuple(s[:axis]) + tuple(idx.shape) + tuple(s[axis + 1:])


def _take_vjp(g, ins, out, attrs):
    x = ins[0]
    axis = attrs["axis"] % x.ndim
    gx = np.zeros_like(x)
    idx = attrs["index"]
    if idx.ndim == 0:
        sl = [slice(None)] * x.ndim
        sl[axis] = int(idx)
        gx[tuple(sl)] += g
    else:
        moved = np.moveaxis(gx, axis, 0)
        gm = np.moveaxis(g.reshape(x.shape[:axis] + (idx.size,) + x.shape[axis + 1:]), axis, 0)
        np.add.at(moved, idx.reshape(-1), gm)
    return (gx,)


@dataclass(frozen=True)
class _Op:
    shape: Callable
    forward: Callable
    vjp: Callable


_OPS: dict[str, _Op] = {
    "add": _Op(_ew_shape, lambda ins, a: ins[0] + ins[1],
               lambda g, ins, out, a: (_reduce_to(g, ins[0].shape), _reduce_to(g, ins[1].shape))),
    "mul": _Op(_ew_shape, lambda ins, a: ins[0] * ins[1],
               lambda g, ins, out, a: (_reduce_to(g * ins[1], ins[0].shape),
                                       _reduce_to(g * ins[0], ins[1].shape))),
    "matmul": _Op(_matmul_shape, _matmul, _matmul_vjp),
    "gelu": _Op(_same_shape, lambda ins, a: _gelu(ins[0]), _gelu_vjp),
    "softmax": _Op(_same_shape, lambda ins, a: _softmax(ins[0]), _softmax_vjp),
    "layer_norm": _Op(_same_shape, lambda ins, a: _layer_norm(ins[0], a), _layer_norm_vjp),
    "embedding": _Op(_embedding_shape, lambda ins, a: ins[0][a["ids"]], _embedding_vjp),
    "cross_entropy": _Op(_xent_shape, lambda ins, a: np.asarray(_xent(ins[0], a)), _xent_vjp),
    "sum": _Op(_reduce_shape, lambda ins, a: np.asarray(ins[0].sum(axis=a["axis"])), _sum_vjp),
    "mean": _Op(_reduce_shape, lambda ins, a: np.asarray(ins[0].mean(axis=a["axis"])), _mean_vjp),
    "sq_l2": _Op(_reduce_shape, lambda ins, a: np.asarray((ins[0] * ins[0]).sum(axis=a["axis"])),
                 lambda g, ins, out, a: (2.0 * ins[0] * _sum_vjp(g, ins, out, a)[0],)),
    "reshape": _Op(_reshape_shape, lambda ins, a: ins[0].reshape(a["shape"]),
                   lambda g, ins, out, a: (g.reshape(ins[0].shape),)),
    "transpose": _Op(_transpose_shape, lambda ins, a: np.transpose(ins[0], a["axes"]),
                     lambda g, ins, out, a: (np.transpose(g, np.argsort(a["axes"])),)),
    "concat": _Op(_concat_shape, lambda ins, a: np.concatenate(ins, axis=a["axis"]), _concat_vjp),
    "take": _Op(_take_shape, lambda ins, a: np.take(ins[0], a["index"], axis=a["axis"]), _take_vjp),
}

PRIMITIVES = tuple(_OPS)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


@dataclass
class Node:
    id: int
    op: str  # "leaf", "const" or a primitive name
    inputs: tuple[int, ...]
    attrs: dict
    shape: tuple[int, ...]
    value: np.ndarray | None
    requires_grad: bool
    name: str | None = None


class Var:
    """Handle to a node recorded on a tape; supports ``+ - * @`` sugar."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.id]

    @property
    def value(self) -> np.ndarray | None:
        return self.node.value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.node.shape

    def item(self) -> float:
        return float(self.value)

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.constant(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self._lift(other) * -1.0)

    def __rsub__(self, other):
        return self.tape.add(self._lift(other), self * -1.0)

    def __mul__(self, other):
        return self.tape.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division is only supported by constants")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))

    def __repr__(self):
        return f"Var(id={self.id}, op={self.node.op}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self._names: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    # -- recording ---------------------------------------------------------

    def _push(self, op, inputs, attrs, shape, value, requires_grad, name=None) -> Var:
        nid = len(self.nodes)
        if name is not None:
            if name in self._names:
                raise TapeError(f"duplicate node name {name!r}", nid)
            self._names[name] = nid
        self.nodes.append(Node(nid, op, tuple(inputs), attrs, tuple(shape), value, requires_grad, name))
        return Var(self, nid)

    def leaf(self, name: str, value=None, *, shape=None, requires_grad: bool | None = None) -> Var:
        """Declare a named input. ``value`` may be a Tensor, an array, or omitted (deferred)."""
        if isinstance(value, Tensor):
            rg = value.requires_grad if requires_grad is None else requires_grad
            data = value.data
        elif value is not None:
            data = np.asarray(value, dtype=np.float64)
            rg = bool(requires_grad)
        else:
            if shape is None:
                raise TapeError(f"leaf {name!r} needs a value or a shape")
            data = None
            rg = bool(requires_grad)
        if data is not None and not np.isfinite(data).all():
            raise TapeError(f"leaf {name!r} has non-finite values", len(self.nodes))
        shp = data.shape if data is not None else tuple(shape)
        return self._push("leaf", (), {}, shp, data, rg, name)

    def constant(self, value) -> Var:
        data = np.asarray(value, dtype=np.float64)
        return self._push("const", (), {}, data.shape, data, False)

    def record(self, op: str, inputs: Sequence[Var], name: str | None = None, **attrs) -> Var:
        spec = _OPS[op]
        for v in inputs:
            if v.tape is not self:
                raise TapeError(f"{op}: input belongs to another tape", len(self.nodes))
        nodes = [v.node for v in inputs]
        nid = len(self.nodes)
        try:
            shape = spec.shape([n.shape for n in nodes], attrs)
        except ValueError as exc:
            raise TapeError(f"{op}: {exc}", nid) from None
        value = None
        if all(n.value is not None for n in nodes):
            value = _run(spec, [n.value for n in nodes], attrs, nid, op)
        rg = any(n.requires_grad for n in nodes)
        return self._push(op, [v.id for v in inputs], attrs, shape, value, rg, name)

    def name(self, var: Var, name: str) -> Var:
        if name in self._names:
            raise TapeError(f"duplicate node name {name!r}", var.id)
        self._names[name] = var.id
        var.node.name = name
        return var

    def named(self) -> dict[str, int]:
        return dict(self._names)

    # -- primitive helpers -------------------------------------------------

    def add(self, a, b, name=None):
        return self.record("add", [a, b], name)

    def mul(self, a, b, name=None):
        return self.record("mul", [a, b], name)

    def matmul(self, a, b, name=None):
        return self.record("matmul", [a, b], name)

    def gelu(self, x, name=None):
        return self.record("gelu", [x], name)

    def softmax(self, x, name=None):
        return self.record("softmax", [x], name)

    def layer_norm(self, x, eps: float = 1e-12, name=None):
        return self.record("layer_norm", [x], name, eps=float(eps))

    def embedding(self, table, ids, name=None):
        return self.record("embedding", [table], name, ids=np.asarray(ids, dtype=np.int64))

    def cross_entropy(self, logits, labels, reduction: str = "mean", name=None):
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        return self.record("cross_entropy", [logits], name,
                           labels=np.asarray(labels, dtype=np.int64), reduction=reduction)

    def sum(self, x, axis: int | None = None, name=None):
        return self.record("sum", [x], name, axis=axis)

    def mean(self, x, axis: int | None = None, name=None):
        return self.record("mean", [x], name, axis=axis)

    def sq_l2(self, x, axis: int | None = -1, name=None):
        return self.record("sq_l2", [x], name, axis=axis)

    def reshape(self, x, shape, name=None):
        return self.record("reshape", [x], name, shape=tuple(int(s) for s in shape))

    def transpose(self, x, axes, name=None):
        return self.record("transpose", [x], name, axes=tuple(int(a) for a in axes))

    def concat(self, xs: Sequence[Var], axis: int, name=None):
        return self.record("concat", list(xs), name, axis=int(axis))

    def take(self, x, index, axis: int, name=None):
        return self.record("take", [x], name, index=np.asarray(index, dtype=np.int64), axis=int(axis))


def _run(spec: _Op, values, attrs, nid, op):
    out = np.asarray(spec.forward(values, attrs), dtype=np.float64)
    if not np.isfinite(out).all():
        raise TapeError(f"{op}: non-finite output", nid)
    return out


def evaluate(tape: Tape, leaves: dict) -> dict[str, Tensor]:
    """Replay the tape from ``leaves`` and return every named node's value.

    Leaves not present in ``leaves`` keep their recorded value; a deferred leaf
    left unbound is an error. The replayed values are stored back on the tape so
    that :func:`backward` can follow.
    """
    names = {n.name for n in tape.nodes if n.op == "leaf"}
    unknown = set(leaves) - names
    if unknown:
        raise TapeError(f"unknown leaf names {sorted(unknown)}")
    for node in tape.nodes:
        if node.op == "leaf":
            if node.name in leaves:
                v = leaves[node.name]
                data = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
                if data.shape != node.shape:
                    raise TapeError(f"leaf {node.name!r} bound with shape {data.shape}, expected {node.shape}",
                                    node.id)
                if not np.isfinite(data).all():
                    raise TapeError(f"leaf {node.name!r} has non-finite values", node.id)
                node.value = data
            elif node.value is None:
                raise TapeError(f"leaf {node.name!r} is unbound", node.id)
        elif node.op != "const":
            spec = _OPS[node.op]
            ins = [tape.nodes[i].value for i in node.inputs]
            try:
                shape = tuple(spec.shape([x.shape for x in ins], node.attrs))
            except ValueError as exc:
                raise TapeError(f"{node.op}: {exc}", node.id) from None
            if shape != node.shape:
                raise TapeError(f"{node.op}: shape {shape} differs from recorded {node.shape}", node.id)
            node.value = _run(spec, ins, node.attrs, node.id, node.op)
    return {n.name: Tensor(n.value.copy()) for n in tape.nodes if n.name is not None}


def _backprop(tape: Tape, output: Var, keep: Iterable[int] = ()) -> dict[int, np.ndarray]:
    if output.tape is not tape:
        raise TapeError("output belongs to another tape")
    out = output.node
    if int(np.prod(out.shape)) != 1:
        raise TapeError(f"backward needs a scalar output, got shape {out.shape}", out.id)
    if any(n.value is None for n in tape.nodes[: out.id + 1]):
        raise TapeError("tape has unevaluated nodes; call evaluate first", out.id)
    keep = set(keep)
    grads: dict[int, np.ndarray] = {out.id: np.ones(out.shape)}
    kept: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes[: out.id + 1]):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if node.id in keep or node.op == "leaf":
            kept[node.id] = g
        if node.op in ("leaf", "const"):
            continue
        ins = [tape.nodes[i] for i in node.inputs]
        parts = _OPS[node.op].vjp(g, [n.value for n in ins], node.value, node.attrs)
        for n, gp in zip(ins, parts):
            if not n.requires_grad:
                continue
            if n.id in grads:
                grads[n.id] = grads[n.id] + gp
            else:
                grads[n.id] = gp
    return kept


def backward(tape: Tape, output: Var) -> dict[str, Tensor]:
    """Gradients of a scalar ``output`` for every leaf that requires grad."""
    kept = _backprop(tape, output)
    result = {}
    for node in tape.nodes:
        if node.op == "leaf" and node.requires_grad:
            g = kept.get(node.id)
            result[node.name] = Tensor(np.zeros(node.shape) if g is None else g)
    return result


def node_grads(tape: Tape, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to arbitrary recorded nodes."""
    kept = _backprop(tape, output, keep=[v.id for v in wrt])
    return [kept.get(v.id, np.zeros(v.shape)) for v in wrt]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``f`` receives a float64 array shaped like ``x``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(base))
        flat[i] = orig - eps
        fm = float(f(base))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.reshape(base.shape))


def frobenius_norm_sq(t) -> float:
    a = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return float(np.sum(a * a))
