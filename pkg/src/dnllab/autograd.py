"""Reverse-mode differentiation over the tensor kernels.

A :class:`Node` records the forward value plus a closure that pushes the
incoming adjoint to its parents. Graphs are built eagerly by calling the
op functions below; :func:`backward` then walks the nodes reachable from
a scalar loss in reverse creation order (a fixed topological order, which
makes repeated backward passes bit-identical). Gradients of fan-out nodes
accumulate by summation.

:func:`finite_diff_check` is the independent oracle: central differences
of the rebuilt loss against the analytic gradients, entry by entry.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .precision import as_scalar_array

_ORDER = itertools.count()


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "backprop", "grad", "order", "name")

    def __init__(self, value, parents=(), backprop=None, name=None):
        self.value = np.asarray(value)
        self.parents = parents
        self.backprop = backprop
        self.grad = None
        self.order = next(_ORDER)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.value.shape}>"


def constant(value, name=None) -> Node:
    """Leaf node; a gradient is still accumulated but never reported."""
    return Node(np.asarray(value), name=name)


def param(name: str, value) -> Node:
    """Named trainable leaf."""
    return Node(as_scalar_array(value), name=name)


def _accum(node: Node, grad: np.ndarray, fresh: bool = False) -> None:
    # fresh=True promises `grad` is a newly allocated array this closure
    # owns, so it may be adopted without a defensive copy
    if node.grad is None:
        if fresh:
            node.grad = grad
        else:
            node.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad)
    else:
        node.grad += grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise tensor.DimensionError(f"add: shapes differ: {a.shape} vs {b.shape}")
    out = Node(a.value + b.value, (a, b))

    def backprop(g):
        _accum(a, g)
        _accum(b, g)

    out.backprop = backprop
    return out


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise tensor.DimensionError(f"sub: shapes differ: {a.shape} vs {b.shape}")
    out = Node(a.value - b.value, (a, b))

    def backprop(g):
        _accum(a, g)
        _accum(b, -g, fresh=True)

    out.backprop = backprop
    return out


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise tensor.DimensionError(f"mul: shapes differ: {a.shape} vs {b.shape}")
    out = Node(a.value * b.value, (a, b))

    def backprop(g):
        _accum(a, g * b.value, fresh=True)
        _accum(b, g * a.value, fresh=True)

    out.backprop = backprop
    return out


def scale(a: Node, c: float) -> Node:
    out = Node(a.value * c, (a,))
    out.backprop = lambda g: _accum(a, g * c, fresh=True)
    return out


def matmul(a: Node, b: Node) -> Node:
    out = Node(tensor.matmul(a.value, b.value), (a, b))

    def backprop(g):
        _accum(a, g @ b.value.T, fresh=True)
        _accum(b, a.value.T @ g, fresh=True)

    out.backprop = backprop
    return out


def matmul_tn(a: Node, b: Node) -> Node:
    """``a.T @ b`` without materializing a transpose node."""
    out = Node(tensor.matmul(a.value.T, b.value), (a, b))

    def backprop(g):
        _accum(a, b.value @ g.T, fresh=True)
        _accum(b, a.value @ g, fresh=True)

    out.backprop = backprop
    return out


def matmul_nt(a: Node, b: Node) -> Node:
    """``a @ b.T`` without materializing a transpose node."""
    out = Node(tensor.matmul(a.value, b.value.T), (a, b))

    def backprop(g):
        _accum(a, g @ b.value, fresh=True)
        _accum(b, g.T @ a.value, fresh=True)

    out.backprop = backprop
    return out


def transpose(a: Node) -> Node:
    # view, no copy: keeps forward values bit-identical to the kernel path
    out = Node(a.value.T, (a,))
    out.backprop = lambda g: _accum(a, g.T)
    return out


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    out = Node(a.value.reshape(shape), (a,))
    out.backprop = lambda g: _accum(a, g.reshape(old))
    return out


def relu(a: Node) -> Node:
    mask = a.value > 0
    out = Node(np.where(mask, a.value, 0.0), (a,))
    out.backprop = lambda g: _accum(a, g * mask, fresh=True)
    return out


def softmax_rows(a: Node) -> Node:
    p = tensor.softmax_rows(a.value)
    out = Node(p, (a,))

    def backprop(g):
        # row-wise Jacobian (diag(p) - p p^T) applied to g, one temp buffer
        tmp = g * p
        s = tmp.sum(axis=1, keepdims=True)
        np.subtract(g, s, out=tmp)
        tmp *= p
        _accum(a, tmp, fresh=True)

    out.backprop = backprop
    return out


def softmax_vec(a: Node) -> Node:
    p = tensor.softmax_vec(a.value)
    out = Node(p, (a,))
    out.backprop = lambda g: _accum(a, p * (g - float((g * p).sum())), fresh=True)
    return out


def mean_cols(a: Node) -> Node:
    """Column mean of a ``[C, N]`` matrix -> ``[C]`` vector."""
    n = a.value.shape[1]
    out = Node(a.value.mean(axis=1), (a,))
    out.backprop = lambda g: _accum(a, np.repeat(g[:, None] / n, n, axis=1), fresh=True)
    return out


def sub_colvec(mat: Node, vec: Node) -> Node:
    """Subtract ``vec [C]`` from every column of ``mat [C, N]``."""
    out = Node(mat.value - vec.value[:, None], (mat, vec))

    def backprop(g):
        _accum(mat, g)
        _accum(vec, -g.sum(axis=1), fresh=True)

    out.backprop = backprop
    return out


def add_rowvec(mat: Node, vec: Node) -> Node:
    """Add ``vec [N]`` to every row of ``mat [M, N]``."""
    out = Node(mat.value + vec.value[None, :], (mat, vec))

    def backprop(g):
        _accum(mat, g)
        _accum(vec, g.sum(axis=0), fresh=True)

    out.backprop = backprop
    return out


def combine_attention(mat: Node, vec_or_mat: Node) -> Node:
    """Counted elementwise combination of two attention terms."""
    out_val = tensor.combine_maps(mat.value, vec_or_mat.value)
    out = Node(out_val, (mat, vec_or_mat))

    def backprop(g):
        _accum(mat, g)
        if vec_or_mat.value.ndim == 1:
            _accum(vec_or_mat, g.sum(axis=0))
        else:
            _accum(vec_or_mat, g)

    out.backprop = backprop
    return out


def tile_rows(vec: Node, rows: int) -> Node:
    """Materialize ``[rows, N]`` whose rows all equal ``vec``."""
    out = Node(np.repeat(vec.value[None, :], rows, axis=0), (vec,))
    out.backprop = lambda g: _accum(vec, g.sum(axis=0), fresh=True)
    return out


def sum_all(a: Node) -> Node:
    out = Node(np.asarray(a.value.sum()), (a,))
    out.backprop = lambda g: _accum(a, np.full_like(a.value, float(g)), fresh=True)
    return out


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = Node(np.asarray(a.value.mean()), (a,))
    out.backprop = lambda g: _accum(a, np.full_like(a.value, float(g) / n), fresh=True)
    return out


def conv3x3(x: Node, kernel: Node) -> Node:
    c, h, w = x.value.shape
    cout = kernel.value.shape[0]
    cols = tensor.im2col3x3(x.value)
    kmat = kernel.value.transpose(0, 2, 3, 1).reshape(cout, 9 * c)
    tensor._tally("matmul", cout * 9 * c * h * w)
    out_val = tensor.ensure_finite((kmat @ cols).reshape(cout, h, w), "conv3x3")
    out = Node(out_val, (x, kernel))

    def backprop(g):
        g2 = g.reshape(cout, h * w)
        dk = (g2 @ cols.T).reshape(cout, 3, 3, c).transpose(0, 3, 1, 2)
        _accum(kernel, dk, fresh=True)
        _accum(x, tensor.col2im3x3(kmat.T @ g2, c, h, w), fresh=True)

    out.backprop = backprop
    return out


def cross_entropy_mean(logits: Node, labels: np.ndarray) -> Node:
    """Mean over pixels of ``-log softmax(logits)[label]``.

    ``logits`` is ``[K, N]`` with one column per pixel, ``labels`` an int
    vector of length N. Fused with the stabilized softmax so the backward
    rule is the classic ``(p - onehot) / N``.
    """
    z = logits.value
    if z.ndim != 2:
        raise tensor.DimensionError(f"cross_entropy_mean expects [K,N] logits, got {z.shape}")
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != z.shape[1]:
        raise tensor.DimensionError(
            f"cross_entropy_mean: {z.shape[1]} pixels vs {labels.shape[0]} labels"
        )
    n = z.shape[1]
    shifted = z - z.max(axis=0, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=0))
    nll = logsumexp - shifted[labels, np.arange(n)]
    out = Node(np.asarray(nll.mean()), (logits,))

    def backprop(g):
        p = np.exp(shifted - logsumexp[None, :])
        p[labels, np.arange(n)] -= 1.0
        _accum(logits, p * (float(g) / n), fresh=True)

    out.backprop = backprop
    return out


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------


class GraphError(ValueError):
    """Raised for malformed backward requests (e.g. non-scalar loss)."""


def _reachable(loss: Node) -> list[Node]:
    seen = set()
    stack = [loss]
    nodes = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.parents)
    nodes.sort(key=lambda n: n.order)
    return nodes


def backward(loss: Node, params: dict[str, Node] | None = None):
    """Gradient of a scalar loss w.r.t. every node, reported per parameter.

    Returns ``(grads, detached)`` where ``grads`` maps each parameter name
    to its gradient (zeros when the parameter does not reach the loss) and
    ``detached`` lists those unreachable names. Intermediate gradients stay
    on ``node.grad`` for probing.
    """
    if loss.value.ndim != 0:
        raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
    nodes = _reachable(loss)
    for node in nodes:
        node.grad = None
    loss.grad = np.ones((), dtype=loss.value.dtype)
    for node in reversed(nodes):
        if node.backprop is not None and node.grad is not None:
            node.backprop(node.grad)
    if params is None:
        return {}, []
    reachable_ids = {id(n) for n in nodes}
    grads = {}
    detached = []
    for name, node in params.items():
        if id(node) not in reachable_ids or node.grad is None:
            grads[name] = np.zeros_like(node.value)
            detached.append(name)
        else:
            grads[name] = node.grad
    return grads, detached


@dataclass
class CheckReport:
    """Outcome of a central-difference gradient check."""

    passed: bool
    max_rel_error: float
    tol: float
    h: float
    per_leaf: dict = field(default_factory=dict)
    worst_leaf: str = ""
    detached: list = field(default_factory=list)
    non_finite: list = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_err={self.max_rel_error:.3e} "
            f"(tol={self.tol:g}, h={self.h:g}, worst={self.worst_leaf or '-'})"
        )


def relative_error(a: float, b: float) -> float:
    """Gradcheck-style relative error, guarded near zero."""
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(loss_fn, params: dict[str, np.ndarray], h: float = 1e-5,
                      tol: float = 1e-6) -> CheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives a dict of named parameter Nodes and must return a
    scalar Node, rebuilding the same pure computation every call.
    """
    if h <= 0:
        raise ValueError("finite_diff_check requires h > 0")
    nodes = {name: param(name, value) for name, value in params.items()}
    loss = loss_fn(nodes)
    grads, detached = backward(loss, nodes)

    def eval_at(values: dict[str, np.ndarray]) -> float:
        out = loss_fn({name: param(name, v) for name, v in values.items()})
        return float(out.value)

    base = {name: np.array(v, dtype=float) for name, v in params.items()}
    per_leaf: dict[str, float] = {}
    non_finite: list[str] = []
    worst_leaf = ""
    max_rel = 0.0
    for name, value in base.items():
        leaf_max = 0.0
        flat = value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = eval_at(base)
            flat[idx] = orig - h
            f_minus = eval_at(base)
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                non_finite.append(f"{name}[{idx}]")
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grads[name].reshape(-1)[idx])
            err = relative_error(numeric, analytic)
            leaf_max = max(leaf_max, err)
        per_leaf[name] = leaf_max
        if leaf_max >= max_rel:
            max_rel = leaf_max
            worst_leaf = name
    passed = max_rel <= tol and not non_finite
    return CheckReport(
        passed=passed, max_rel_error=max_rel, tol=tol, h=h, per_leaf=per_leaf,
        worst_leaf=worst_leaf, detached=detached, non_finite=non_finite,
    )
