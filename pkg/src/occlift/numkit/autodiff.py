"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an immutable ``float64`` array. When any input of a
primitive lives on a :class:`Tape`, the primitive records its vector-Jacobian
product there; tensors without a tape are plain values, which is how eval-mode
forward passes run with no bookkeeping at all.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericalError, ShapeError


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Nodes are appended as primitives execute, so inputs always precede the
    nodes that consume them.
    """

    def __init__(self):
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.shapes: list[tuple[int, ...]] = []
        self.param_nodes: dict[str, int] = {}

    def __len__(self):
        return len(self.parents)

    def param(self, name: str, value) -> Tensor:
        if name in self.param_nodes:
            raise ContractError(f"parameter {name!r} registered twice on the tape")
        t = self._push(np.asarray(value, dtype=np.float64), (), None)
        self.param_nodes[name] = t.node
        return t

    def _push(self, value: np.ndarray, parents: tuple[int, ...], vjp) -> Tensor:
        idx = len(self.parents)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.shapes.append(value.shape)
        return Tensor(value, self, idx)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``loss`` for every registered parameter."""
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.parents)
        grads[loss.node] = np.ones(self.shapes[loss.node])
        for idx in range(loss.node, -1, -1):
            g = grads[idx]
            if g is None or not self.parents[idx]:
                continue
            for p, gp in zip(self.parents[idx], self.vjps[idx](g)):
                if gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
            grads[idx] = None  # intermediates are not kept
        out = {}
        for name, idx in self.param_nodes.items():
            g = grads[idx]
            out[name] = np.zeros(self.shapes[idx]) if g is None else g
        return out


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    # a finite sum proves every entry finite; only an overflowing sum needs the full scan
    if not np.isfinite(value.sum()) and not np.isfinite(value).all():
        raise NumericalError(f"non-finite values produced by {op}")
    return value


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(value, op)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{op}: inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    parents = tuple(t.node if t.tape is not None else -1 for t in inputs)
    live = [i for i, p in enumerate(parents) if p >= 0]

    def wrapped(g):
        gs = vjp(g)
        return [gs[i] for i in live]

    return tape._push(value, tuple(parents[i] for i in live), wrapped)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading batch axes broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    if B.ndim == 2 and A.ndim > 2:
        # one large GEMM beats numpy's stacked-matrix loop
        A2 = A.reshape(-1, A.shape[-1])
        out = (A2 @ B).reshape(A.shape[:-1] + (B.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ B.T).reshape(A.shape) if a.tape is not None else None
            gb = A2.T @ g2 if b.tape is not None else None
            return ga, gb
    else:
        out = A @ B

        def vjp(g):
            ga = unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape) if a.tape is not None else None
            gb = unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape) if b.tape is not None else None
            return ga, gb

    return _record("matmul", out, (a, b), vjp)


def propagate(adj, x) -> Tensor:
    """Left-multiply ``x`` (``[..., N, d]``) by a constant ``N x N`` operator.

    ``adj`` may be a dense array or a scipy sparse matrix; it never receives a
    gradient.
    """
    x = as_tensor(x)
    n = adj.shape[0]
    if x.shape[-2] != adj.shape[1]:
        raise ShapeError(f"propagate: operator {adj.shape} vs features {x.shape}")
    def apply(op, X):
        if X.ndim == 2:
            return np.asarray(op @ X)
        lead = X.shape[:-2]
        d = X.shape[-1]
        flat = np.moveaxis(X.reshape(-1, X.shape[-2], d), 0, 1).reshape(X.shape[-2], -1)
        res = np.asarray(op @ flat).reshape(n, -1, d)
        return np.moveaxis(res, 1, 0).reshape(*lead, n, d)

    out = apply(adj, x.data)
    # transposing a sparse operator allocates, so only backward passes pay for it
    return _record("propagate", out, (x,), lambda g: (apply(adj.T, g),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    out = A * B

    def vjp(g):
        ga = unbroadcast(g * B, A.shape) if a.tape is not None else None
        gb = unbroadcast(g * A, B.shape) if b.tape is not None else None
        return ga, gb

    return _record("mul", out, (a, b), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def mask_multiply(x, mask) -> Tensor:
    """Multiply by a constant 0/1 (or scaled) mask; zero rows get zero gradient."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    try:
        out = x.data * m
    except ValueError as exc:
        raise ShapeError(f"mask of shape {m.shape} does not fit features {x.shape}") from exc
    if out.shape != x.shape:
        raise ShapeError(f"mask of shape {m.shape} would broadcast features {x.shape}")
    return _record("mask_multiply", out, (x,), lambda g: (g * m,))


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: Bernoulli keep-mask scaled by ``1/(1-rate)`` in training."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(x.shape) >= rate
    return mask_multiply(x, keep / (1.0 - rate))


def tsum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def maximum(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise max over same-shaped tensors; ties route to the first."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("maximum over an empty sequence")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"maximum: shape {x.shape} differs from {shape}")
    if len(xs) == 1:
        return xs[0]
    out = xs[0].data
    for x in xs[1:]:
        out = np.maximum(out, x.data)

    def vjp(g):
        free = np.ones(shape, bool)
        grads = []
        for x in xs:
            win = free & (x.data == out)
            free &= ~win
            grads.append(g * win)
        return grads

    return _record("maximum", out, xs, vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record("take", np.take(x.data, index, axis=axis), (x,), vjp)


def mse(pred, target, weights=None) -> Tensor:
    """Weighted mean of squared differences.

    ``weights`` broadcasts against ``pred``; the mean divides by the summed
    weight, so zero-weight entries contribute nothing to value or gradient.
    """
    pred = as_tensor(pred)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if tgt.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {tgt.shape}")
    w = np.ones(pred.shape) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=np.float64), pred.shape)
    total = w.sum()
    if total <= 0:
        raise ContractError("mse: no entry carries positive weight")
    diff = np.where(w > 0, pred.data - tgt, 0.0)
    out = np.asarray((w * diff * diff).sum() / total)
    return _record("mse", out, (pred,), lambda g: (g * 2.0 * w * diff / total,))
