"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are define-by-run: every operation appends a node to its graph, so
creation order is already a topological order and the backward pass is a
single reverse sweep. Values are plain numpy arrays in double precision.
Leaves are either named parameters (gradients are collected for these) or
constants. Gradients accumulate additively across fan-out.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested op."""


class DomainError(ValueError):
    """Operand values outside the op's domain (e.g. log of a nonpositive)."""


class NonFiniteError(ValueError):
    """NaN or Inf rejected at array construction."""


class NonScalarRootError(ValueError):
    """backward() requires a scalar-valued root node."""


def as_array(value, context: str = "array") -> np.ndarray:
    """Coerce to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{context}: non-finite values rejected")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- op table ---------------------------------------------------------------
# forward(values, consts) -> ndarray
# vjp(grad_out, values, out_value, consts) -> per-parent gradient list
#   (None entries mean "no gradient flows to this parent")


def _check_binary_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _matmul_fwd(values, consts):
    a, b = values
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != (b.shape[0] if b.ndim >= 1 else None):
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _matmul_vjp(g, values, out, consts):
    a, b = values
    if a.ndim == 2 and b.ndim == 2:
        return [g @ b.T, a.T @ g]
    if a.ndim == 1 and b.ndim == 2:
        return [b @ g, np.outer(a, g)]
    if a.ndim == 2 and b.ndim == 1:
        return [np.outer(g, b), a.T @ g]
    return [g * b, g * a]  # 1-D dot


def _slice_index(a, consts):
    axis = consts["axis"]
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(consts["start"], consts["stop"])
    return tuple(idx)


def _concat_vjp(g, values, out, consts):
    axis = consts["axis"]
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    return list(np.split(g, sizes, axis=axis))


def _sum_vjp(g, values, out, consts):
    (a,) = values
    axis = consts["axis"]
    if axis is None:
        return [np.full(a.shape, g)]
    return [np.broadcast_to(np.expand_dims(g, axis), a.shape)]


def _mean_vjp(g, values, out, consts):
    (a,) = values
    axis = consts["axis"]
    if axis is None:
        return [np.full(a.shape, g / a.size)]
    return [np.broadcast_to(np.expand_dims(g / a.shape[axis], axis), a.shape)]


def _bilinear_fwd(values, consts):
    x, m, y = values
    if x.ndim != 1 or y.ndim != 1 or m.ndim != 2 or m.shape != (x.shape[0], y.shape[0]):
        raise ShapeError(f"bilinear: shapes {x.shape}, {m.shape}, {y.shape} do not conform")
    return np.asarray(x @ m @ y)


def _gather_fwd(values, consts):
    (table,) = values
    ids = consts["ids"]
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table {table.shape}")
    return table[ids]


def _gather_vjp(g, values, out, consts):
    (table,) = values
    grad = np.zeros_like(table)
    np.add.at(grad, consts["ids"], g)
    return [grad]


def _log_fwd(values, consts):
    (a,) = values
    if np.any(a <= 0):
        raise DomainError("log: nonpositive operand")
    return np.log(a)


_OPS: dict[str, tuple] = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (
        lambda v, c: (_check_binary_broadcast("add", *v), v[0] + v[1])[1],
        lambda g, v, o, c: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
    ),
    "mul": (
        lambda v, c: (_check_binary_broadcast("mul", *v), v[0] * v[1])[1],
        lambda g, v, o, c: [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)],
    ),
    "sigmoid": (
        lambda v, c: _sigmoid(v[0]),
        lambda g, v, o, c: [g * o * (1.0 - o)],
    ),
    "tanh": (
        lambda v, c: np.tanh(v[0]),
        lambda g, v, o, c: [g * (1.0 - o * o)],
    ),
    "softplus": (
        lambda v, c: np.logaddexp(0.0, v[0]),
        lambda g, v, o, c: [g * _sigmoid(v[0])],
    ),
    "log": (
        _log_fwd,
        lambda g, v, o, c: [g / v[0]],
    ),
    "square": (
        lambda v, c: v[0] * v[0],
        lambda g, v, o, c: [2.0 * g * v[0]],
    ),
    "scale": (
        lambda v, c: v[0] * c["k"],
        lambda g, v, o, c: [g * c["k"]],
    ),
    "concat": (
        lambda v, c: np.concatenate(v, axis=c["axis"]),
        _concat_vjp,
    ),
    "slice": (
        lambda v, c: v[0][_slice_index(v[0], c)],
        lambda g, v, o, c: [_place_slice(v[0], g, c)],
    ),
    "sum": (
        lambda v, c: np.asarray(np.sum(v[0], axis=c["axis"])),
        _sum_vjp,
    ),
    "mean": (
        lambda v, c: np.asarray(np.mean(v[0], axis=c["axis"])),
        _mean_vjp,
    ),
    "bilinear": (
        _bilinear_fwd,
        lambda g, v, o, c: [g * (v[1] @ v[2]), g * np.outer(v[0], v[2]), g * (v[1].T @ v[0])],
    ),
    "gather": (_gather_fwd, _gather_vjp),
}


def _place_slice(a, g, consts):
    grad = np.zeros_like(a)
    grad[_slice_index(a, consts)] = g
    return grad


OP_KINDS = frozenset(_OPS)


class Node:
    """One value in a computation graph; gradient is filled by backward()."""

    __slots__ = ("idx", "op", "parents", "consts", "value", "grad", "name")

    def __init__(self, idx, op, parents, consts, value, name=None):
        self.idx = idx
        self.op = op
        self.parents = parents
        self.consts = consts
        self.value = value
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape


class Graph:
    """A single-owner, single-threaded tape of nodes.

    Ops are available both through the generic :meth:`build` dispatcher and
    through convenience methods (``g.add(a, b)`` etc.). ``backward`` returns
    gradients for named parameter leaves only.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- leaves --

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        node = self._append(None, [], {}, as_array(value, f"param {name}"), name=name)
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        return self._append(None, [], {}, as_array(value, "constant"))

    def _append(self, op, parents, consts, value, name=None) -> Node:
        node = Node(len(self.nodes), op, parents, consts, value, name)
        self.nodes.append(node)
        return node

    # -- generic op construction --

    def build(self, op_kind: str, inputs: list[Node], **consts) -> Node:
        if op_kind not in _OPS:
            raise ValueError(f"unknown op kind: {op_kind!r}")
        fwd, _ = _OPS[op_kind]
        value = fwd([n.value for n in inputs], consts)
        return self._append(op_kind, list(inputs), consts, value)

    # -- convenience wrappers --

    def matmul(self, a, b):
        return self.build("matmul", [a, b])

    def add(self, a, b):
        return self.build("add", [a, b])

    def mul(self, a, b):
        return self.build("mul", [a, b])

    def sub(self, a, b):
        return self.add(a, self.scale(b, -1.0))

    def sigmoid(self, a):
        return self.build("sigmoid", [a])

    def tanh(self, a):
        return self.build("tanh", [a])

    def softplus(self, a):
        return self.build("softplus", [a])

    def log(self, a):
        return self.build("log", [a])

    def square(self, a):
        return self.build("square", [a])

    def scale(self, a, k: float):
        return self.build("scale", [a], k=float(k))

    def concat(self, parts, axis=0):
        return self.build("concat", list(parts), axis=axis)

    def slice(self, a, axis: int, start: int, stop: int):
        return self.build("slice", [a], axis=axis, start=start, stop=stop)

    def sum(self, a, axis=None):
        return self.build("sum", [a], axis=axis)

    def mean(self, a, axis=None):
        return self.build("mean", [a], axis=axis)

    def bilinear(self, x, m, y):
        return self.build("bilinear", [x, m, y])

    def gather(self, table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return self.build("gather", [table], ids=ids)

    # -- differentiation --

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar root; returns param-name -> gradient.

        Parameters the root does not depend on are omitted from the result.
        Deterministic: identical graphs yield bit-identical gradients.
        """
        if root.value.ndim != 0:
            raise NonScalarRootError(f"backward root must be scalar, got shape {root.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes[: root.idx + 1]):
            if node.grad is None or node.op is None:
                continue
            _, vjp = _OPS[node.op]
            contribs = vjp(node.grad, [p.value for p in node.parents], node.value, node.consts)
            for parent, contrib in zip(node.parents, contribs):
                if contrib is None:
                    continue
                parent.grad = contrib if parent.grad is None else parent.grad + contrib
        return {name: node.grad for name, node in self.params.items() if node.grad is not None}

    def _recompute(self, upto: Node) -> None:
        for node in self.nodes[: upto.idx + 1]:
            if node.op is not None:
                fwd, _ = _OPS[node.op]
                node.value = fwd([p.value for p in node.parents], node.consts)

    def finite_diff(self, root: Node, name: str, eps: float = 1e-5) -> np.ndarray:
        """Central-difference gradient of `root` w.r.t. parameter `name`.

        Re-evaluates the recorded graph one perturbed coordinate at a time;
        intended as a test oracle, not a fast path.
        """
        if eps <= 0:
            raise ValueError("eps must be positive")
        if root.value.ndim != 0:
            raise NonScalarRootError("finite_diff root must be scalar")
        leaf = self.params[name]
        flat = leaf.value.ravel()
        out = np.zeros_like(leaf.value)
        out_flat = out.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            self._recompute(root)
            f_plus = float(root.value)
            flat[k] = orig - eps
            self._recompute(root)
            f_minus = float(root.value)
            flat[k] = orig
            out_flat[k] = (f_plus - f_minus) / (2.0 * eps)
        self._recompute(root)
        return out
