"""Dense-array algebra with reverse-mode gradients.

Arrays are float64 numpy ndarrays. A :class:`DiffValue` wraps one array
together with a gradient slot and the provenance needed for reverse-mode
differentiation; operations build an acyclic graph of DiffValues and
:func:`backward` accumulates gradients through it.

The operation set is exactly what the training/evaluation pipeline needs:
elementwise arithmetic, affine maps, row softmax, cross-entropy, pairwise
squared distances, an off-diagonal variance reduction, and a differentiable
linear solve (gradients via the adjoint system, not an explicit inverse).
Every operation checks its output for NaN/Inf and raises instead of letting
non-finite values propagate.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

Array = np.ndarray

LOG_FLOOR = 1e-12          # clamp for log arguments inside cross_entropy
PIVOT_FLOOR = 1e-12        # LU pivot magnitude below this is treated as singular


class NonFiniteError(ArithmeticError):
    """An operation produced (or was handed) NaN or Inf."""


class SingularMatrixError(ArithmeticError):
    """linear_solve met a pivot below the singularity floor."""


def _checked(value: Array, op: str) -> Array:
    out = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values in result of {op}")
    return out


class DiffValue:
    """A float64 array plus gradient slot and provenance.

    Values are immutable after construction. ``grad`` is (re)allocated by
    :func:`backward` for every node reachable from the loss; leaves created
    with :meth:`parameter` carry a name so optimizers can address them.
    """

    __slots__ = ("value", "grad", "name", "_parents", "_vjp")

    def __init__(
        self,
        value: Array,
        parents: tuple["DiffValue", ...] = (),
        vjp: Callable[[Array], None] | None = None,
        name: str | None = None,
        _op: str = "constant",
    ):
        arr = _checked(value, _op)
        arr.setflags(write=False)
        self.value = arr
        self.grad: Array | None = None
        self.name = name
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.value.shape}{tag})"


def constant(x) -> DiffValue:
    return DiffValue(np.array(x, dtype=np.float64))


def parameter(x, name: str) -> DiffValue:
    if not name:
        raise ValueError("parameter needs a non-empty name")
    return DiffValue(np.array(x, dtype=np.float64), name=name)


def _as_diff(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else constant(x)


def _make(value: Array, op: str, parents: tuple[DiffValue, ...], vjp) -> DiffValue:
    return DiffValue(value, parents=parents, vjp=vjp, name=None, _op=op)


def _require_same_shape(a: DiffValue, b: DiffValue, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a, b) -> DiffValue:
    a, b = _as_diff(a), _as_diff(b)
    _require_same_shape(a, b, "add")

    def vjp(g: Array) -> None:
        a.grad += g
        b.grad += g

    return _make(a.value + b.value, "add", (a, b), vjp)


def sub(a, b) -> DiffValue:
    a, b = _as_diff(a), _as_diff(b)
    _require_same_shape(a, b, "sub")

    def vjp(g: Array) -> None:
        a.grad += g
        b.grad -= g

    return _make(a.value - b.value, "sub", (a, b), vjp)


def mul(a, b) -> DiffValue:
    a, b = _as_diff(a), _as_diff(b)
    _require_same_shape(a, b, "mul")

    def vjp(g: Array) -> None:
        a.grad += g * b.value
        b.grad += g * a.value

    return _make(a.value * b.value, "mul", (a, b), vjp)


def scale(a, c: float) -> DiffValue:
    a = _as_diff(a)
    c = float(c)

    def vjp(g: Array) -> None:
        a.grad += c * g

    return _make(a.value * c, "scale", (a,), vjp)


def add_scalar(a, c: float) -> DiffValue:
    a = _as_diff(a)

    def vjp(g: Array) -> None:
        a.grad += g

    return _make(a.value + float(c), "add_scalar", (a,), vjp)


def exp(a) -> DiffValue:
    a = _as_diff(a)
    out = _checked(np.exp(a.value), "exp")

    def vjp(g: Array) -> None:
        a.grad += g * out

    return _make(out, "exp", (a,), vjp)


def powf(a, p: float) -> DiffValue:
    """Elementwise power with real exponent; inputs must keep a**p finite."""
    a = _as_diff(a)
    p = float(p)
    out = _checked(np.power(a.value, p), "powf")

    def vjp(g: Array) -> None:
        a.grad += g * p * np.power(a.value, p - 1.0)

    return _make(out, "powf", (a,), vjp)


def relu(a) -> DiffValue:
    a = _as_diff(a)
    mask = a.value > 0.0

    def vjp(g: Array) -> None:
        a.grad += g * mask

    return _make(np.where(mask, a.value, 0.0), "relu", (a,), vjp)


def mul_const(a, m: Array) -> DiffValue:
    """Elementwise product with a constant mask/matrix (no gradient into m)."""
    a = _as_diff(a)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != a.shape:
        raise ValueError(f"mul_const: shape mismatch {a.shape} vs {m.shape}")

    def vjp(g: Array) -> None:
        a.grad += g * m

    return _make(a.value * m, "mul_const", (a,), vjp)


def div_scalar(a, s: DiffValue) -> DiffValue:
    """Divide an array by a scalar DiffValue."""
    a, s = _as_diff(a), _as_diff(s)
    if s.shape != ():
        raise ValueError("div_scalar: divisor must be a scalar")
    out = _checked(a.value / s.value, "div_scalar")

    def vjp(g: Array) -> None:
        a.grad += g / s.value
        s.grad += -np.sum(g * a.value) / (s.value ** 2)

    return _make(out, "div_scalar", (a, s), vjp)


def matmul(a, b) -> DiffValue:
    a, b = _as_diff(a), _as_diff(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g: Array) -> None:
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    return _make(a.value @ b.value, "matmul", (a, b), vjp)


def transpose(a) -> DiffValue:
    a = _as_diff(a)

    def vjp(g: Array) -> None:
        a.grad += g.T

    return _make(a.value.T.copy(), "transpose", (a,), vjp)


def add_rowvec(a, v) -> DiffValue:
    """Add a length-m vector to every row of an (n, m) matrix."""
    a, v = _as_diff(a), _as_diff(v)
    if a.value.ndim != 2 or v.shape != (a.shape[1],):
        raise ValueError(f"add_rowvec: shapes {a.shape} and {v.shape}")

    def vjp(g: Array) -> None:
        a.grad += g
        v.grad += g.sum(axis=0)

    return _make(a.value + v.value[None, :], "add_rowvec", (a, v), vjp)


def scale_rows(a, v) -> DiffValue:
    """Multiply row i of an (n, m) matrix by v[i]."""
    a, v = _as_diff(a), _as_diff(v)
    if a.value.ndim != 2 or v.shape != (a.shape[0],):
        raise ValueError(f"scale_rows: shapes {a.shape} and {v.shape}")

    def vjp(g: Array) -> None:
        a.grad += g * v.value[:, None]
        v.grad += (g * a.value).sum(axis=1)

    return _make(a.value * v.value[:, None], "scale_rows", (a, v), vjp)


def scale_cols(a, v) -> DiffValue:
    """Multiply column j of an (n, m) matrix by v[j]."""
    a, v = _as_diff(a), _as_diff(v)
    if a.value.ndim != 2 or v.shape != (a.shape[1],):
        raise ValueError(f"scale_cols: shapes {a.shape} and {v.shape}")

    def vjp(g: Array) -> None:
        a.grad += g * v.value[None, :]
        v.grad += (g * a.value).sum(axis=0)

    return _make(a.value * v.value[None, :], "scale_cols", (a, v), vjp)


def sum_all(a) -> DiffValue:
    a = _as_diff(a)

    def vjp(g: Array) -> None:
        a.grad += g * np.ones_like(a.value)

    return _make(np.asarray(a.value.sum()), "sum_all", (a,), vjp)


def sum_axis0(a) -> DiffValue:
    a = _as_diff(a)
    if a.value.ndim != 2:
        raise ValueError("sum_axis0: expects a matrix")

    def vjp(g: Array) -> None:
        a.grad += np.broadcast_to(g[None, :], a.shape)

    return _make(a.value.sum(axis=0), "sum_axis0", (a,), vjp)


def sum_axis1(a) -> DiffValue:
    a = _as_diff(a)
    if a.value.ndim != 2:
        raise ValueError("sum_axis1: expects a matrix")

    def vjp(g: Array) -> None:
        a.grad += np.broadcast_to(g[:, None], a.shape)

    return _make(a.value.sum(axis=1), "sum_axis1", (a,), vjp)


def concat_rows(parts: Sequence[DiffValue]) -> DiffValue:
    parts = tuple(_as_diff(p) for p in parts)
    if not parts or any(p.value.ndim != 2 for p in parts):
        raise ValueError("concat_rows: expects a non-empty sequence of matrices")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += g[lo:hi]

    return _make(np.concatenate([p.value for p in parts], axis=0), "concat_rows", parts, vjp)


def slice_rows(a, start: int, stop: int) -> DiffValue:
    a = _as_diff(a)
    if a.value.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ValueError(f"slice_rows: bad range [{start}:{stop}] for shape {a.shape}")

    def vjp(g: Array) -> None:
        a.grad[start:stop] += g

    return _make(a.value[start:stop].copy(), "slice_rows", (a,), vjp)


def take_rows(a, indices) -> DiffValue:
    a = _as_diff(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.value.ndim != 2:
        raise ValueError("take_rows: expects a matrix")

    def vjp(g: Array) -> None:
        np.add.at(a.grad, idx, g)

    return _make(a.value[idx].copy(), "take_rows", (a,), vjp)


# ---------------------------------------------------------------------------
# pipeline-specific operations


def pairwise_sq_dist(z) -> DiffValue:
    """All-pairs squared Euclidean distances of the rows of an (n, d) matrix.

    The result is exactly symmetric with an exact-zero diagonal.
    """
    z = _as_diff(z)
    if z.value.ndim != 2 or z.shape[0] < 1 or z.shape[1] < 1:
        raise ValueError(f"pairwise_sq_dist: expects a non-empty matrix, got {z.shape}")
    v = z.value
    sq = np.sum(v * v, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    d2 = 0.5 * (d2 + d2.T)
    np.fill_diagonal(d2, 0.0)
    np.maximum(d2, 0.0, out=d2)

    def vjp(g: Array) -> None:
        s = g + g.T
        z.grad += 2.0 * (s.sum(axis=1)[:, None] * v - s @ v)

    return _make(d2, "pairwise_sq_dist", (z,), vjp)


def cross_sq_dist(x, y) -> DiffValue:
    """Squared distances between rows of x (n, d) and rows of y (m, d)."""
    x, y = _as_diff(x), _as_diff(y)
    if x.value.ndim != 2 or y.value.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"cross_sq_dist: shapes {x.shape} and {y.shape}")
    xv, yv = x.value, y.value
    d2 = np.sum(xv * xv, axis=1)[:, None] + np.sum(yv * yv, axis=1)[None, :] - 2.0 * (xv @ yv.T)
    np.maximum(d2, 0.0, out=d2)

    def vjp(g: Array) -> None:
        x.grad += 2.0 * (g.sum(axis=1)[:, None] * xv - g @ yv)
        y.grad += 2.0 * (g.sum(axis=0)[:, None] * yv - g.T @ xv)

    return _make(d2, "cross_sq_dist", (x, y), vjp)


def offdiag_variance(d2) -> DiffValue:
    """Population variance of the off-diagonal entries of a square matrix."""
    d2 = _as_diff(d2)
    n = d2.shape[0]
    if d2.value.ndim != 2 or d2.shape[0] != d2.shape[1] or n < 2:
        raise ValueError(f"offdiag_variance: expects a square matrix with n >= 2, got {d2.shape}")
    mask = 1.0 - np.eye(n)
    count = n * (n - 1)
    mean = float(np.sum(d2.value * mask)) / count
    centered = (d2.value - mean) * mask
    var = float(np.sum(centered * centered * mask)) / count

    def vjp(g: Array) -> None:
        # d var / d entry = 2 * mask * (entry - mean) / count; mean terms cancel.
        d2.grad += g * (2.0 / count) * centered

    return _make(np.asarray(var), "offdiag_variance", (d2,), vjp)


def row_softmax(x) -> DiffValue:
    """Row-wise softmax of an (n, m) matrix, stabilized by per-row max shift."""
    x = _as_diff(x)
    if x.value.ndim != 2:
        raise ValueError("row_softmax: expects a matrix")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g: Array) -> None:
        x.grad += p * (g - np.sum(g * p, axis=1, keepdims=True))

    return _make(p, "row_softmax", (x,), vjp)


def onehot(labels, num_classes: int) -> Array:
    """Constant one-hot row matrix for integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("onehot: expects a non-empty 1-D label array")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("onehot: label out of range")
    out = np.zeros((labels.size, num_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(probs, targets: Array) -> DiffValue:
    """Mean over rows of -log(target probability).

    ``targets`` is a constant one-hot matrix. Target probabilities below
    LOG_FLOOR are clamped so the loss stays finite; clamped entries get a
    zero gradient.
    """
    probs = _as_diff(probs)
    t = np.asarray(targets, dtype=np.float64)
    if probs.value.ndim != 2 or t.shape != probs.shape:
        raise ValueError(f"cross_entropy: shapes {probs.shape} and {t.shape}")
    rows_ok = np.all(np.isin(t, (0.0, 1.0))) and np.all(t.sum(axis=1) == 1.0)
    if not rows_ok:
        raise ValueError("cross_entropy: targets must be one-hot rows")
    n = probs.shape[0]
    idx = np.argmax(t, axis=1)
    picked = probs.value[np.arange(n), idx]
    clamped = np.maximum(picked, LOG_FLOOR)
    val = float(np.mean(-np.log(clamped)))

    def vjp(g: Array) -> None:
        rows = np.where(picked >= LOG_FLOOR)[0]
        probs.grad[rows, idx[rows]] += -float(g) / (n * clamped[rows])

    return _make(np.asarray(val), "cross_entropy", (probs,), vjp)


def linear_solve(a, b) -> DiffValue:
    """Solve A X = B for X with gradients through both A and B.

    A is LU-factorized once; a pivot magnitude below PIVOT_FLOOR raises
    SingularMatrixError. The backward pass solves the transposed system
    against the incoming gradient (adjoint of the solve) instead of forming
    an explicit inverse.
    """
    a, b = _as_diff(a), _as_diff(b)
    if a.value.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"linear_solve: A must be square, got {a.shape}")
    if b.value.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ValueError(f"linear_solve: B shape {b.shape} incompatible with A {a.shape}")
    lu, piv = scipy.linalg.lu_factor(a.value, check_finite=False)
    smallest = float(np.min(np.abs(np.diag(lu))))
    if not np.isfinite(smallest) or smallest < PIVOT_FLOOR:
        raise SingularMatrixError(f"singular or ill-conditioned system (pivot {smallest:.3e})")
    x = scipy.linalg.lu_solve((lu, piv), b.value, check_finite=False)

    def vjp(g: Array) -> None:
        gb = scipy.linalg.lu_solve((lu, piv), g, trans=1, check_finite=False)
        b.grad += gb
        a.grad += -gb @ x.T

    return _make(x, "linear_solve", (a, b), vjp)


# ---------------------------------------------------------------------------
# reverse pass and parameter updates


def _toposort(root: DiffValue) -> list[DiffValue]:
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: DiffValue, params: Iterable[DiffValue] = ()) -> dict[str, Array]:
    """Accumulate d(loss)/d(node) into every node reachable from ``loss``.

    Returns a map from parameter name to gradient for the given parameters;
    parameters that do not appear in the graph get exact zeros. Gradient
    slots are reset at the start of each call.
    """
    if not isinstance(loss, DiffValue):
        raise TypeError("backward: loss must be a DiffValue")
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    in_graph = {id(n) for n in order}
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._vjp is not None:
            node._vjp(node.grad)
    grads: dict[str, Array] = {}
    for p in params:
        if p.name is None:
            raise ValueError("backward: parameters must be named")
        if id(p) in in_graph:
            grads[p.name] = np.array(p.grad)
        else:
            grads[p.name] = np.zeros_like(p.value)
    return grads


def sgd_step(
    params: Mapping[str, DiffValue],
    grads: Mapping[str, Array],
    lr: float,
) -> dict[str, DiffValue]:
    """Return fresh parameter leaves p - lr * g."""
    if lr < 0:
        raise ValueError("sgd_step: learning rate must be non-negative")
    updated: dict[str, DiffValue] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        updated[name] = parameter(p.value - lr * g, name=name)
    return updated
