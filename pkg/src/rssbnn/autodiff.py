"""Reverse-mode automatic differentiation over dense float64 tensors.

Every operation returns a :class:`GraphNode` that stores its value, its
parent nodes, and a closure mapping the upstream gradient to per-parent
gradients.  :func:`backward` walks the graph once in reverse topological
order and accumulates gradients.  Stochastic quantities enter the graph as
``requires_grad=False`` leaves holding externally drawn noise, which keeps
reparameterized samplers differentiable in their parameters.

All math is 64-bit; op outputs are checked for NaN/Inf and raise
:class:`~rssbnn.errors.NonFiniteValue` on violation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NonFiniteValue, NonScalarRoot, ShapeMismatch

__all__ = [
    "Tensor",
    "GraphNode",
    "leaf",
    "constant",
    "as_node",
    "backward",
    "grad_check",
    "GradCheckReport",
    "op_forward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "absolute",
    "relu",
    "l2norm",
    "broadcast_to",
    "reshape",
    "clip",
]


class Tensor:
    """Immutable dense array of 64-bit floats, row-major."""

    __slots__ = ("array",)

    def __init__(self, values, *, _copy: bool = True):
        arr = np.array(values, dtype=np.float64, order="C", copy=_copy)
        if _copy or arr.flags.writeable:
            arr.flags.writeable = False
        self.array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: takes ownership of a freshly computed array.
        # (np.ascontiguousarray would promote 0-d arrays to 1-d.)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        return cls(arr, _copy=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the elements."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite values produced by op '{op}'")


class GraphNode:
    """One node of the computation graph.

    ``backward_rule`` maps the upstream gradient (ndarray shaped like
    ``value``) to a tuple of gradients, one per parent (``None`` for
    parents that need no gradient).
    """

    __slots__ = ("value", "parents", "backward_rule", "requires_grad", "op")

    def __init__(
        self,
        value: Tensor,
        parents: Sequence["GraphNode"] = (),
        backward_rule: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool = False,
        op: str = "leaf",
    ):
        self.value = value
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return self.value.item()

    def assign(self, new_value) -> None:
        """Replace the value of a leaf (used by optimizers)."""
        if self.parents or self.backward_rule is not None:
            raise ValueError("assign() is only valid on leaf nodes")
        tensor = new_value if isinstance(new_value, Tensor) else Tensor(new_value)
        if tensor.shape != self.value.shape:
            raise ShapeMismatch(
                f"assign shape {tensor.shape} != leaf shape {self.value.shape}"
            )
        _check_finite(tensor.array, "assign")
        self.value = tensor

    # Operator sugar; constants are lifted automatically.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"GraphNode(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(values, requires_grad: bool = True) -> GraphNode:
    """Create a leaf node (a parameter when ``requires_grad``)."""
    tensor = values if isinstance(values, Tensor) else Tensor(values)
    _check_finite(tensor.array, "leaf")
    return GraphNode(tensor, requires_grad=requires_grad)


def constant(values) -> GraphNode:
    """Leaf that never receives gradients (noise, data, fixed scalars)."""
    return leaf(values, requires_grad=False)


def as_node(x) -> GraphNode:
    if isinstance(x, GraphNode):
        return x
    return constant(x)


def _make(value: np.ndarray, parents, rule, op: str) -> GraphNode:
    _check_finite(value, op)
    requires = any(p.requires_grad for p in parents)
    return GraphNode(
        Tensor._wrap(value),
        parents=parents,
        backward_rule=rule if requires else None,
        requires_grad=requires,
        op=op,
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_values(a, b):
    a, b = as_node(a), as_node(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b) -> GraphNode:
    a, b = _binary_values(a, b)
    val = a.value.array + b.value.array

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(val, (a, b), rule, "add")


def sub(a, b) -> GraphNode:
    a, b = _binary_values(a, b)
    val = a.value.array - b.value.array

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(val, (a, b), rule, "sub")


def mul(a, b) -> GraphNode:
    a, b = _binary_values(a, b)
    av, bv = a.value.array, b.value.array
    val = av * bv

    def rule(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(val, (a, b), rule, "mul")


def neg(a) -> GraphNode:
    a = as_node(a)
    return _make(-a.value.array, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> GraphNode:
    a, b = as_node(a), as_node(b)
    av, bv = a.value.array, b.value.array
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    if av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    val = av @ bv

    def rule(g):
        return g @ bv.T, av.T @ g

    return _make(val, (a, b), rule, "matmul")


def transpose(a) -> GraphNode:
    a = as_node(a)
    if a.value.array.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D operand")
    return _make(a.value.array.T, (a,), lambda g: (g.T,), "transpose")


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None) -> GraphNode:
    a = as_node(a)
    av = a.value.array
    axes = _normalize_axis(axis, av.ndim)
    val = av.sum(axis=axes)

    def rule(g):
        if axes is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        g_exp = np.expand_dims(g, axes)
        return (np.broadcast_to(g_exp, av.shape).copy(),)

    return _make(np.asarray(val), (a,), rule, "sum")


def reduce_mean(a, axis=None) -> GraphNode:
    a = as_node(a)
    av = a.value.array
    axes = _normalize_axis(axis, av.ndim)
    val = av.mean(axis=axes)
    count = av.size if axes is None else int(np.prod([av.shape[i] for i in axes]))

    def rule(g):
        if axes is None:
            return (np.broadcast_to(g / count, av.shape).copy(),)
        g_exp = np.expand_dims(g / count, axes)
        return (np.broadcast_to(g_exp, av.shape).copy(),)

    return _make(np.asarray(val), (a,), rule, "mean")


def sigmoid(a) -> GraphNode:
    a = as_node(a)
    x = a.value.array
    z = np.exp(-np.abs(x))
    val = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def rule(g):
        return (g * val * (1.0 - val),)

    return _make(val, (a,), rule, "sigmoid")


def softplus(a) -> GraphNode:
    # max(x, 0) + log1p(exp(-|x|)): overflow-safe for large |x|.
    a = as_node(a)
    x = a.value.array
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    z = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def rule(g):
        return (g * sig,)

    return _make(val, (a,), rule, "softplus")


def log(a) -> GraphNode:
    a = as_node(a)
    x = a.value.array
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    val = np.log(x)

    def rule(g):
        return (g / x,)

    return _make(val, (a,), rule, "log")


def exp(a) -> GraphNode:
    a = as_node(a)
    with np.errstate(over="ignore"):
        val = np.exp(a.value.array)

    def rule(g):
        return (g * val,)

    return _make(val, (a,), rule, "exp")


def absolute(a) -> GraphNode:
    a = as_node(a)
    x = a.value.array

    def rule(g):
        return (g * np.sign(x),)

    return _make(np.abs(x), (a,), rule, "abs")


def relu(a) -> GraphNode:
    a = as_node(a)
    x = a.value.array

    def rule(g):
        return (g * (x > 0),)

    return _make(np.maximum(x, 0.0), (a,), rule, "relu")


def l2norm(a, axis=None) -> GraphNode:
    a = as_node(a)
    x = a.value.array
    axes = _normalize_axis(axis, x.ndim)
    sq = (x * x).sum(axis=axes)
    val = np.sqrt(sq)
    safe = np.maximum(val, np.finfo(np.float64).tiny)

    def rule(g):
        if axes is None:
            return (g * x / safe,)
        g_exp = np.expand_dims(g / safe, axes)
        return (g_exp * x,)

    return _make(np.asarray(val), (a,), rule, "l2norm")


def broadcast_to(a, shape) -> GraphNode:
    a = as_node(a)
    shape = tuple(shape)
    try:
        val = np.broadcast_to(a.value.array, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}") from exc

    def rule(g):
        return (_unbroadcast(g, a.shape),)

    return _make(val.copy(), (a,), rule, "broadcast")


def reshape(a, shape) -> GraphNode:
    a = as_node(a)
    shape = tuple(shape)
    try:
        val = a.value.array.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from exc

    def rule(g):
        return (g.reshape(a.shape),)

    return _make(val.copy(), (a,), rule, "reshape")


def clip(a, lo: float, hi: float) -> GraphNode:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    a = as_node(a)
    x = a.value.array
    val = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)

    def rule(g):
        return (g * inside,)

    return _make(val, (a,), rule, "clip")


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "neg": neg,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "abs": absolute,
    "relu": relu,
    "l2norm": l2norm,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "transpose": transpose,
    "clip": clip,
}


def op_forward(kind: str, inputs: Sequence, **kwargs) -> GraphNode:
    """Dispatch-style op construction: ``op_forward("add", [a, b])``."""
    try:
        fn = _OPS[kind]
    except KeyError as exc:
        raise ValueError(f"unknown op kind {kind!r}") from exc
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _toposort(root: GraphNode) -> list[GraphNode]:
    order: list[GraphNode] = []
    seen: set[int] = set()
    stack: list[tuple[GraphNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: GraphNode, wrt: Sequence[GraphNode] | None = None) -> dict[GraphNode, Tensor]:
    """Gradients of a scalar root w.r.t. every requires-grad node.

    Stateless: calling it twice on the same graph returns identical
    gradients.  If ``wrt`` is given, the returned map is restricted to
    those nodes (all reachable gradients are still computed).
    """
    if root.value.array.size != 1:
        raise NonScalarRoot(f"backward root must be scalar, got shape {root.shape}")

    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value.array)}
    result: dict[GraphNode, Tensor] = {}
    wanted = None if wrt is None else {id(n) for n in wrt}

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if g.shape != node.value.shape:
            raise ShapeMismatch(
                f"gradient shape {g.shape} != value shape {node.value.shape} at op {node.op!r}"
            )
        if wanted is None or id(node) in wanted:
            result[node] = Tensor(g)
        if node.backward_rule is None:
            continue
        parent_grads = node.backward_rule(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _scalar_eval(f, arrays) -> float:
    leaves = [leaf(Tensor(a)) for a in arrays]
    root = f(leaves)
    if root.value.array.size != 1:
        raise NonScalarRoot("grad_check builder must return a scalar node")
    return float(root.value.array.reshape(-1)[0])


def grad_check(f, params, step: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``f`` builds a scalar graph from a list of leaf nodes and must be
    deterministic across calls (re-seed any rng it uses internally so the
    noise is replayed identically for both evaluations).  The relative
    error is |analytic - numeric| / (1 + max(|analytic|, |numeric|)).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(p.array if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]
    leaves = [leaf(Tensor(a)) for a in arrays]
    root = f(leaves)
    if root.value.array.size != 1:
        raise NonScalarRoot("grad_check builder must return a scalar node")
    grad_map = backward(root, wrt=leaves)

    per_param: list[float] = []
    for i, base in enumerate(arrays):
        analytic = grad_map.get(leaves[i])
        a = np.zeros_like(base) if analytic is None else analytic.array
        worst = 0.0
        for idx in np.ndindex(base.shape):
            perturbed = [arr.copy() for arr in arrays]
            perturbed[i][idx] = base[idx] + step
            f_plus = _scalar_eval(f, perturbed)
            perturbed[i][idx] = base[idx] - step
            f_minus = _scalar_eval(f, perturbed)
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(a[idx] - numeric) / (1.0 + max(abs(a[idx]), abs(numeric)))
            worst = max(worst, err)
        per_param.append(worst)
    overall = max(per_param) if per_param else 0.0
    return GradCheckReport(max_rel_error=overall, per_param=per_param, tol=tol)
