"""Reverse-mode differentiation over numpy arrays.

Each primitive returns a :class:`Tensor` that remembers its operands and a
closure mapping the output gradient to operand gradients. :func:`backward`
topologically sorts that record from the output and runs the closures in
reverse. Everything is float64.

Beyond the usual arithmetic, the primitives cover what graph attention needs:
``gather_rows`` (node -> arc), ``segment_sum`` / ``segment_max`` (arc -> node),
and ``sparse_dense_matmul`` with differentiable arc weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def _node(value, parents, backward) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[idx[e]] += values[e] along the leading axis."""
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n).astype(np.float64)
    s = sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
    flat = values.reshape(idx.size, -1)
    return np.asarray(s @ flat).reshape((n,) + values.shape[1:])


# --------------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)
    return _node(av @ bv, (a, b), back)


def sparse_dense_matmul(values, rows=None, cols=None, num_rows: int | None = None,
                        dense: Tensor | None = None) -> Tensor:
    """``S @ dense`` for a sparse ``S``.

    Either ``values`` is a constant scipy sparse matrix and ``rows``/``cols`` are
    omitted (``sparse_dense_matmul(S, dense=X)``), or ``S`` is given in
    coordinate form by a per-entry weight vector ``values`` (Tensor, gradients
    flow to it) with index arrays ``rows`` and ``cols``.
    """
    if dense is None:
        raise TypeError("dense operand is required")
    dense = _lift(dense)
    if dense.value.ndim != 2:
        raise ShapeError(f"sparse_dense_matmul: dense operand must be 2-D, got {dense.shape}")
    if sparse.issparse(values):
        mat = values.tocsr()
        if mat.shape[1] != dense.shape[0]:
            raise ShapeError(f"sparse_dense_matmul: shapes {mat.shape} and {dense.shape}")

        def back_const(g):
            return (mat.T @ g,)
        return _node(np.asarray(mat @ dense.value), (dense,), back_const)

    vals = _lift(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if vals.value.ndim != 1 or vals.shape[0] != rows.size or rows.size != cols.size:
        raise ShapeError(f"sparse_dense_matmul: weights {vals.shape} vs {rows.size} coordinates")
    if cols.size and cols.max() >= dense.shape[0]:
        raise ShapeError(f"sparse_dense_matmul: column index exceeds dense rows {dense.shape[0]}")
    n = int(num_rows)
    mat = sparse.csr_matrix((vals.value, (rows, cols)), shape=(n, dense.shape[0]))
    dv = dense.value

    def back(g):
        gv = np.einsum("ef,ef->e", g[rows], dv[cols]) if vals.requires_grad else None
        gd = mat.T @ g if dense.requires_grad else None
        return gv, gd
    return _node(np.asarray(mat @ dv), (vals, dense), back)


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _same_shape("add", a, b)

    def back(g):
        return g, g
    return _node(a.value + b.value, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)

    def back(g):
        return (c * g,)
    return _node(c * a.value, (a,), back)


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value

    def back(g):
        return g * bv, g * av
    return _node(av * bv, (a, b), back)


def div(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def back(g):
        return g / bv, -g * out / bv
    return _node(out, (a, b), back)


def concat_columns(parts) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat_columns: nothing to concatenate")
    n = parts[0].shape[0]
    for p in parts:
        if p.value.ndim != 2 or p.shape[0] != n:
            raise ShapeError(f"concat_columns: shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))
    return _node(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back)


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None

    def back(g):
        return (g.reshape(old),)
    return _node(out, (a,), back)


def gather_rows(a: Tensor, idx) -> Tensor:
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index outside [0, {a.shape[0]})")
    n = a.shape[0]

    def back(g):
        return (_scatter_rows(idx, g, n),)
    return _node(a.value[idx], (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _lift(a)
    d = np.where(a.value >= 0, 1.0, slope)

    def back(g):
        return (g * d,)
    return _node(a.value * d, (a,), back)


def elu(a: Tensor) -> Tensor:
    a = _lift(a)
    pos = a.value >= 0
    ex = np.exp(np.minimum(a.value, 0.0))
    d = np.where(pos, 1.0, ex)

    def back(g):
        return (g * d,)
    return _node(np.where(pos, a.value, ex - 1.0), (a,), back)


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.exp(a.value)

    def back(g):
        return (g * out,)
    return _node(out, (a,), back)


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    av = a.value

    def back(g):
        return (g / av,)
    return _node(np.log(av), (a,), back)


def hinge(a: Tensor) -> Tensor:
    """max(0, x); gradient 1 for x >= 0."""
    a = _lift(a)
    pos = a.value >= 0

    def back(g):
        return (g * pos,)
    return _node(np.where(pos, a.value, 0.0), (a,), back)


def segment_sum(a: Tensor, segments, num_segments: int) -> Tensor:
    a = _lift(a)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != a.shape[:1]:
        raise ShapeError(f"segment_sum: {seg.shape[0] if seg.ndim else 0} segment ids for {a.shape[0]} rows")

    def back(g):
        return (g[seg],)
    return _node(_scatter_rows(seg, a.value, int(num_segments)), (a,), back)


def segment_max(a: Tensor, segments, num_segments: int) -> Tensor:
    """Per-segment maximum (empty segments give 0).

    The gradient goes to the first maximal row of each segment.
    """
    a = _lift(a)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != a.shape[:1]:
        raise ShapeError(f"segment_max: {seg.size} segment ids for {a.shape[0]} rows")
    n = int(num_segments)
    width = int(np.prod(a.shape[1:], dtype=np.int64))
    flat = a.value.reshape(-1)
    flat_seg = (seg[:, None] * width + np.arange(width)).reshape(-1)
    out = np.full(n * width, -np.inf)
    np.maximum.at(out, flat_seg, flat)
    out[np.isneginf(out)] = 0.0
    hit = np.flatnonzero(flat == out[flat_seg])
    winner = np.full(n * width, flat.size, dtype=np.int64)
    np.minimum.at(winner, flat_seg[hit], hit)
    owned = winner < flat.size

    def back(g):
        ga = np.zeros(flat.size)
        ga[winner[owned]] = g.reshape(-1)[owned]
        return (ga.reshape(a.shape),)
    return _node(out.reshape((n,) + a.shape[1:]), (a,), back)


def reduce_sum(a: Tensor) -> Tensor:
    a = _lift(a)
    shape = a.shape

    def back(g):
        return (np.full(shape, float(g)),)
    return _node(np.array(a.value.sum()), (a,), back)


def reduce_mean(a: Tensor) -> Tensor:
    a = _lift(a)
    shape = a.shape
    size = max(a.value.size, 1)

    def back(g):
        return (np.full(shape, float(g) / size),)
    return _node(np.array(a.value.sum() / size), (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    a = _lift(a)
    if a.value.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-D input, got {a.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)
    return _node(out, (a,), back)


def softplus(a: Tensor) -> Tensor:
    a = _lift(a)
    av = a.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))

    def back(g):
        return (g * sig,)
    return _node(np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av))), (a,), back)


# ----------------------------------------------------------------------- backward

def _topological_order(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. ``params`` (name -> leaf tensor).

    Parameters the output does not depend on get all-zero gradients. Without
    ``params``, every named leaf reachable from ``output`` is reported.
    """
    if output.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.value)
        for node in reversed(_topological_order(output)):
            g = grads.get(id(node))
            if node._backward is None:
                leaves[id(node)] = node
                continue
            grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    if params is None:
        return {t.name or str(k): grads.get(k, np.zeros(t.shape)) for k, t in leaves.items()}
    return {name: grads.get(id(t), np.zeros(t.shape)) for name, t in params.items()}


# ------------------------------------------------------------- finite differences

@dataclass
class FiniteDiffReport:
    max_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, tuple[int, ...]] | None = None


def finite_diff_check(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], epsilon: float = 1e-5) -> FiniteDiffReport:
    """Compare engine gradients with central differences.

    The error of one coordinate is ``|analytic - numeric| / max(1, |numeric|)``;
    the report carries the maximum over every coordinate of every parameter.
    ``loss_fn`` must be deterministic (freeze any sampling inside it).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    report = FiniteDiffReport()
    if not base:
        return report

    leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    out = loss_fn(leaves)
    analytic = backward(out, leaves)

    def evaluate(values: dict[str, np.ndarray]) -> float:
        return float(loss_fn({k: Tensor(v) for k, v in values.items()}).value)

    if evaluate(base) != evaluate(base) or evaluate(base) != float(out.value):
        raise NonDeterministicError("loss_fn returned different values for identical inputs")

    for name, value in base.items():
        worst = 0.0
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate(base)
            flat[i] = orig - epsilon
            f_minus = evaluate(base)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
            if err > report.max_error:
                report.max_error = err
                report.worst = (name, np.unravel_index(i, value.shape))
        report.per_param[name] = worst
    return report
