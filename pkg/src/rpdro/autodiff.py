"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records every primitive application eagerly: the forward
value is computed as soon as the node is created, and :func:`backward`
walks the record in reverse to accumulate vector-Jacobian products.

    >>> tape = Tape()
    >>> x = tape.leaf(np.array(3.0))
    >>> y = tape.mul(x, x)
    >>> float(backward(tape, y)[x])
    6.0
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

Tensor = np.ndarray


class AutodiffError(ValueError):
    """Raised for shape violations and non-finite values on a tape."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


def _all_finite(arr: np.ndarray) -> bool:
    # a finite sum rules out NaN/Inf entries; only fall back on overflow
    return math.isfinite(arr.sum()) or bool(np.isfinite(arr).all())


def as_tensor(values: Any) -> Tensor:
    """View ``values`` as a finite float64 array (copying only if needed)."""
    arr = np.asarray(values, dtype=np.float64)
    if not _all_finite(arr):
        raise AutodiffError("tensor contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# shape rules and forward/backward kernels
# ---------------------------------------------------------------------------


def _shape_error(op: str, *shapes: tuple) -> AutodiffError:
    joined = " and ".join(str(list(s)) for s in shapes)
    return AutodiffError(f"{op}: incompatible shapes {joined}")


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    # row-wise bias: [n, k] (+) [k]
    if op in ("add", "sub") and a.ndim == 2 and b.ndim == 1 and sa[1] == sb[0]:
        return
    raise _shape_error(op, sa, sb)


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    # row-wise bias
    return grad.sum(axis=0)


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return a @ b


def _bwd_matmul(g, vals, out, attrs):
    a, b = vals
    return g @ b.T, a.T @ g


def _fwd_add(vals, attrs):
    _check_binary("add", *vals)
    return vals[0] + vals[1]


def _bwd_add(g, vals, out, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _fwd_sub(vals, attrs):
    _check_binary("sub", *vals)
    return vals[0] - vals[1]


def _bwd_sub(g, vals, out, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)


def _fwd_mul(vals, attrs):
    _check_binary("mul", *vals)
    return vals[0] * vals[1]


def _bwd_mul(g, vals, out, attrs):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fwd_scalar_mul(vals, attrs):
    return vals[0] * attrs["c"]


def _bwd_scalar_mul(g, vals, out, attrs):
    return (g * attrs["c"],)


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _bwd_relu(g, vals, out, attrs):
    # subgradient 0 at exactly 0
    return (g * (vals[0] > 0.0),)


def _fwd_tanh(vals, attrs):
    return np.tanh(vals[0])


def _bwd_tanh(g, vals, out, attrs):
    return (g * (1.0 - out * out),)


def _fwd_exp(vals, attrs):
    with np.errstate(over="ignore"):
        return np.exp(vals[0])


def _bwd_exp(g, vals, out, attrs):
    return (g * out,)


def _fwd_log(vals, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(vals[0])


def _bwd_log(g, vals, out, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return (g / vals[0],)


def _fwd_square(vals, attrs):
    return vals[0] * vals[0]


def _bwd_square(g, vals, out, attrs):
    return (2.0 * g * vals[0],)


def _fwd_xlogx(vals, attrs):
    x = vals[0]
    if np.any(x < 0):
        return np.full_like(x, np.nan)
    safe = np.where(x > 0, x, 1.0)
    return np.where(x > 0, x * np.log(safe), 0.0)


def _bwd_xlogx(g, vals, out, attrs):
    # at x == 0 the true slope is -inf; every caller feeds softmax outputs,
    # whose Jacobian carries a factor x, so 0 is the correct chained value
    x = vals[0]
    safe = np.where(x > 0, x, 1.0)
    return (np.where(x > 0, g * (np.log(safe) + 1.0), 0.0),)


def _fwd_clip(vals, attrs):
    return np.clip(vals[0], attrs["lo"], attrs["hi"])


def _bwd_clip(g, vals, out, attrs):
    x = vals[0]
    return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)


def _fwd_sum(vals, attrs):
    return np.asarray(vals[0].sum(axis=attrs.get("axis")))


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _bwd_sum(g, vals, out, attrs):
    return (_expand(g, vals[0].shape, attrs.get("axis")).copy(),)


def _fwd_mean(vals, attrs):
    x = vals[0]
    if x.size == 0:
        raise AutodiffError("mean: empty input")
    return np.asarray(x.mean(axis=attrs.get("axis")))


def _bwd_mean(g, vals, out, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    count = x.size if axis is None else x.shape[axis]
    return (_expand(g, x.shape, axis) / count,)


def _fwd_logsumexp(vals, attrs):
    x = vals[0]
    axis = attrs.get("axis", -1)
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _bwd_logsumexp(g, vals, out, attrs):
    x = vals[0]
    axis = attrs.get("axis", -1)
    p = np.exp(x - np.expand_dims(out, axis))
    return (np.expand_dims(g, axis) * p,)


def _fwd_softmax(vals, attrs):
    x = vals[0]
    axis = attrs.get("axis", -1)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _bwd_softmax(g, vals, out, attrs):
    axis = attrs.get("axis", -1)
    inner = (g * out).sum(axis=axis, keepdims=True)
    return (out * (g - inner),)


def _fwd_select(vals, attrs):
    x = vals[0]
    idx = attrs["index"]
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise _shape_error("select", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise AutodiffError(f"select: column index out of range for shape {list(x.shape)}")
    return x[np.arange(x.shape[0]), idx]


def _bwd_select(g, vals, out, attrs):
    x = vals[0]
    grad = np.zeros_like(x)
    grad[np.arange(x.shape[0]), attrs["index"]] = g
    return (grad,)


_KERNELS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "scalar-mul": (_fwd_scalar_mul, _bwd_scalar_mul),
    "relu": (_fwd_relu, _bwd_relu),
    "tanh": (_fwd_tanh, _bwd_tanh),
    "exp": (_fwd_exp, _bwd_exp),
    "log": (_fwd_log, _bwd_log),
    "square": (_fwd_square, _bwd_square),
    "xlogx": (_fwd_xlogx, _bwd_xlogx),
    "clip": (_fwd_clip, _bwd_clip),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "logsumexp": (_fwd_logsumexp, _bwd_logsumexp),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "select": (_fwd_select, _bwd_select),
}

PRIMITIVES = frozenset(_KERNELS)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: Tensor
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False


class Tape:
    """Ordered record of primitive applications.

    Node ids are positions in :attr:`nodes`; a node's inputs always refer
    to earlier positions, so the record is acyclic by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value: Any) -> int:
        """Record a differentiable input (a parameter)."""
        node_id = self._push(Node("leaf", (), as_tensor(value), requires_grad=True))
        self.leaves.append(node_id)
        return node_id

    def constant(self, value: Any) -> int:
        return self._push(Node("const", (), as_tensor(value)))

    def value(self, node: int) -> Tensor:
        return self.nodes[node].value

    def apply(self, op: str, *inputs: int, **attrs: Any) -> int:
        try:
            forward = _KERNELS[op][0]
        except KeyError:
            raise AutodiffError(f"unknown primitive {op!r}") from None
        n = len(self.nodes)
        for i in inputs:
            if not 0 <= i < n:
                raise AutodiffError(f"{op}: input node {i} does not exist")
        vals = [self.nodes[i].value for i in inputs]
        out = forward(vals, attrs)
        if not _all_finite(out):
            raise AutodiffError(f"{op}: non-finite value at node {n}", node=n)
        req = any(self.nodes[i].requires_grad for i in inputs)
        return self._push(Node(op, tuple(inputs), out, attrs, req))

    def replay(self, leaf_values: Mapping[int, Any] | None = None) -> list[Tensor]:
        """Recompute every node forward, optionally substituting leaf values."""
        leaf_values = leaf_values or {}
        values: list[Tensor] = []
        for i, node in enumerate(self.nodes):
            if node.op in ("leaf", "const"):
                values.append(as_tensor(leaf_values[i]) if i in leaf_values else node.value)
                continue
            forward = _KERNELS[node.op][0]
            values.append(forward([values[j] for j in node.inputs], node.attrs))
        return values

    # convenience wrappers, one per primitive
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, a, c: float):
        return self.apply("scalar-mul", a, c=float(c))

    def relu(self, a):
        return self.apply("relu", a)

    def tanh(self, a):
        return self.apply("tanh", a)

    def exp(self, a):
        return self.apply("exp", a)

    def log(self, a):
        return self.apply("log", a)

    def square(self, a):
        return self.apply("square", a)

    def xlogx(self, a):
        return self.apply("xlogx", a)

    def clip(self, a, lo: float, hi: float):
        return self.apply("clip", a, lo=float(lo), hi=float(hi))

    def sum(self, a, axis: int | None = None):
        return self.apply("sum", a, axis=axis)

    def mean(self, a, axis: int | None = None):
        return self.apply("mean", a, axis=axis)

    def logsumexp(self, a, axis: int = -1):
        return self.apply("logsumexp", a, axis=axis)

    def softmax(self, a, axis: int = -1):
        return self.apply("softmax", a, axis=axis)

    def select(self, a, index):
        return self.apply("select", a, index=np.asarray(index, dtype=np.int64))


def backward(tape: Tape, output: int) -> dict[int, Tensor]:
    """Gradient of the scalar node ``output`` with respect to every leaf."""
    out_node = tape.nodes[output]
    if out_node.value.shape != ():
        raise AutodiffError(
            f"backward needs a scalar output, node {output} has shape {list(out_node.value.shape)}"
        )
    grads = _accumulate(tape, output, check=False)
    nodes = tape.nodes
    result = {}
    for leaf in tape.leaves:
        g = grads[leaf] if leaf <= output else None
        result[leaf] = np.zeros_like(nodes[leaf].value) if g is None else np.asarray(g, dtype=np.float64)
    if not all(_all_finite(g) for g in result.values()):
        # walk again with per-node checks to name the culprit
        _accumulate(tape, output, check=True)
        raise AutodiffError("non-finite gradient")
    return result


def _accumulate(tape: Tape, output: int, check: bool) -> list:
    grads: list[Tensor | None] = [None] * (output + 1)
    grads[output] = np.ones(())
    nodes = tape.nodes
    for i in range(output, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or not node.requires_grad or not node.inputs:
            continue
        vals = [nodes[j].value for j in node.inputs]
        parts = _KERNELS[node.op][1](g, vals, node.value, node.attrs)
        for j, part in zip(node.inputs, parts):
            if not nodes[j].requires_grad:
                continue
            if check and not _all_finite(part):
                raise AutodiffError(f"non-finite gradient flowing out of node {i} ({node.op})", node=i)
            grads[j] = part if grads[j] is None else grads[j] + part
    return grads


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class ParamSet(dict):
    """Named parameter arrays. Shapes are fixed once a name is set."""

    def __setitem__(self, name: str, value: Any) -> None:
        arr = as_tensor(value)
        if name in self and self[name].shape != arr.shape:
            raise ValueError(
                f"parameter {name!r} has shape {list(self[name].shape)}, got {list(arr.shape)}"
            )
        super().__setitem__(name, arr)

    def __init__(self, *args, **kwargs) -> None:
        super().__init__()
        for k, v in dict(*args, **kwargs).items():
            self[k] = v

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            dict.__setitem__(out, k, v.copy())
        return out

    def bind(self, tape: Tape) -> dict[str, int]:
        """Register every parameter as a leaf on ``tape``."""
        return {k: tape.leaf(v) for k, v in self.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k]).tobytes())
        return h.hexdigest()


def finite_diff_check(
    function: Callable[[Tape, Mapping[str, int]], int],
    point: ParamSet,
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``function(tape, nodes)`` must build a scalar node from the leaves in
    ``nodes`` (as returned by :meth:`ParamSet.bind`).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    tape = Tape()
    nodes = point.bind(tape)
    out = function(tape, nodes)
    grads = backward(tape, out)

    def evaluate(params: ParamSet) -> float:
        t = Tape()
        return float(t.value(function(t, params.bind(t))))

    worst = 0.0
    for name, base in point.items():
        analytic = grads[nodes[name]]
        for idx in np.ndindex(base.shape):
            plus, minus = point.copy(), point.copy()
            plus[name][idx] += h
            minus[name][idx] -= h
            central = (evaluate(plus) - evaluate(minus)) / (2 * h)
            a = float(analytic[idx])
            err = abs(a - central) / max(1e-8, abs(a) + abs(central))
            if not np.isfinite(err):
                raise AutodiffError(f"non-finite finite-difference result for {name}{list(idx)}")
            worst = max(worst, err)
    return worst
