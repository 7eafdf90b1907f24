"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every value is a 64-bit ``(rows, cols)`` array. Nothing broadcasts: row-wise
bias addition, gathers and segment reductions are separate ops with their own
gradient rules.

A :class:`Tape` owns one forward/backward pass. Leaves are registered with
:meth:`Tape.leaf`; every op whose inputs live on a tape records itself there.
Tensors without a tape are constants and never receive gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class EmptySetError(ValueError):
    """An op that normalises over a set received zero elements."""


class ContractError(ValueError):
    """A caller violated an op precondition other than shape."""


class Tensor:
    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: Tape | None = None, node: int = -1):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensor must be 2-D, got shape {arr.shape}")
        self.value = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {kind})"


def constant(value) -> Tensor:
    return Tensor(value)


def column(values: Sequence[float]) -> Tensor:
    """Build an n x 1 constant column vector."""
    return Tensor(np.asarray(values, dtype=np.float64).reshape(-1, 1))


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


GradRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self) -> None:
        self._records: list[tuple[int, tuple[int, ...], GradRule]] = []
        self._shapes: list[tuple[int, int]] = []
        self._leaves: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self._shapes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        node = len(self._shapes)
        t = Tensor(value, self, node)
        self._shapes.append(t.shape)
        self._leaves[node] = name if name is not None else f"leaf{node}"
        return t

    def _emit(self, value: np.ndarray, inputs: Sequence[Tensor], rule: GradRule) -> Tensor:
        node = len(self._shapes)
        out = Tensor(value, self, node)
        self._shapes.append(out.shape)
        self._records.append((node, tuple(t.node if t.tape is self else -1 for t in inputs), rule))
        return out

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to every leaf, keyed by leaf name."""
        if loss.tape is not self:
            raise ContractError("loss tensor was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._shapes)
        grads[loss.node] = np.ones((1, 1))
        for out_node, in_nodes, rule in reversed(self._records):
            g = grads[out_node]
            if g is None:
                continue
            grads[out_node] = None if out_node not in self._leaves else g
            for node, gin in zip(in_nodes, rule(g)):
                if node < 0 or gin is None:
                    continue
                if grads[node] is None:
                    grads[node] = np.array(gin, dtype=np.float64, copy=True)
                else:
                    grads[node] += gin
        return {
            name: grads[node] if grads[node] is not None else np.zeros(self._shapes[node])
            for node, name in self._leaves.items()
        }


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _result(value: np.ndarray, inputs: Sequence[Tensor], rule: GradRule) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape._emit(value, inputs, rule)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _result(a.value.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.value * c, (a,), lambda g: (g * c,))


def add_rowvec(x: Tensor, row: Tensor) -> Tensor:
    """Add a 1 x k row to every row of an n x k matrix."""
    if row.shape[0] != 1 or row.shape[1] != x.shape[1]:
        raise ShapeError(f"add_rowvec needs a 1x{x.shape[1]} row, got {row.shape}")
    return _result(x.value + row.value, (x, row), lambda g: (g, g.sum(axis=0, keepdims=True)))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 1 x 1 tensor."""
    shape = x.shape
    return _result(np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.value > 0
    return _result(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Stack column vector ``a`` on top of column vector ``b``."""
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise ShapeError(f"concat needs column vectors, got {a.shape} and {b.shape}")
    m = a.shape[0]
    return _result(np.vstack([a.value, b.value]), (a, b), lambda g: (g[:m], g[m:]))


def hstack(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation: ``[a_r ⊕ b_r]`` for every row r."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"hstack row mismatch: {a.shape} and {b.shape}")
    k = a.shape[1]
    return _result(np.hstack([a.value, b.value]), (a, b), lambda g: (g[:, :k], g[:, k:]))


def softmax(scores: Tensor) -> Tensor:
    if scores.shape[1] != 1:
        raise ShapeError(f"softmax needs a column vector, got {scores.shape}")
    if scores.shape[0] == 0:
        raise EmptySetError("softmax over an empty set")
    s = scores.value
    e = np.exp(s - s.max())
    y = e / e.sum()
    return _result(y, (scores,), lambda g: (y * (g - float((g * y).sum())),))


def weighted_sum(weights: Tensor, vectors: Sequence[Tensor]) -> Tensor:
    """``sum_k weights[k] * vectors[k]`` over column vectors of equal length."""
    n = weights.shape[0]
    if weights.shape[1] != 1 or n != len(vectors):
        raise ShapeError(f"weighted_sum got weights {weights.shape} for {len(vectors)} vectors")
    if n == 0:
        raise EmptySetError("weighted_sum over an empty set")
    d = vectors[0].shape
    for v in vectors:
        if v.shape != d or d[1] != 1:
            raise ShapeError(f"weighted_sum vectors must share one column shape, got {v.shape} vs {d}")
    stacked = np.hstack([v.value for v in vectors])  # d x n
    w = weights.value
    out = stacked @ w

    def rule(g):
        gw = stacked.T @ g
        return (gw, *[g * w[k, 0] for k in range(n)])

    return _result(out, (weights, *vectors), rule)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity (same object) when not training."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.value * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# gathers and segment reductions used by the batched forward pass


def _scatter_add(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``index``."""
    if index.size == 0:
        return np.zeros((n, values.shape[1]))
    m = sparse.csr_matrix(
        (np.ones(index.size), (index, np.arange(index.size))), shape=(n, index.size)
    )
    return np.asarray(m @ values)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather index out of range for table with {n} rows")
    shape = table.shape

    def rule(g):
        return (_scatter_add(index, g, shape[0]),)

    return _result(table.value[index], (table,), rule)


def _check_segments(seg: np.ndarray, n_seg: int, rows: int) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (rows,):
        raise ShapeError(f"segment ids must have length {rows}, got {seg.shape}")
    if rows and (seg.min() < 0 or seg.max() >= n_seg):
        raise IndexError("segment id out of range")
    return seg


def segment_softmax(scores: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    """Softmax of a score column computed independently within each segment."""
    if scores.shape[1] != 1:
        raise ShapeError(f"segment_softmax needs a column, got {scores.shape}")
    seg = _check_segments(seg, n_seg, scores.shape[0])
    s = scores.value[:, 0]
    top = np.full(n_seg, -np.inf)
    np.maximum.at(top, seg, s)
    e = np.exp(s - top[seg])
    denom = np.bincount(seg, weights=e, minlength=n_seg)
    y = (e / denom[seg]).reshape(-1, 1)

    def rule(g):
        dot = np.bincount(seg, weights=(g * y)[:, 0], minlength=n_seg)
        return (y * (g - dot[seg].reshape(-1, 1)),)

    return _result(y, (scores,), rule)


def segment_weighted_sum(weights: Tensor, rows: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    """``out[s] = sum_{e in s} weights[e] * rows[e]``; empty segments give zeros."""
    if weights.shape != (rows.shape[0], 1):
        raise ShapeError(f"weights {weights.shape} do not match rows {rows.shape}")
    seg = _check_segments(seg, n_seg, rows.shape[0])
    w, x = weights.value, rows.value
    out = _scatter_add(seg, w * x, n_seg)

    def rule(g):
        ge = g[seg]
        return ((ge * x).sum(axis=1, keepdims=True), ge * w)

    return _result(out, (weights, rows), rule)


def segment_mean_weights(seg: np.ndarray, n_seg: int) -> Tensor:
    """Constant ``1/|segment|`` weight for every element (the mean aggregator)."""
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_seg)
    return Tensor((1.0 / counts[seg]).reshape(-1, 1) if seg.size else np.zeros((0, 1)))


def half_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """``sum((pred - target)^2) / (2 n)`` for an n x 1 prediction column."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.shape[0] == 0:
        raise ContractError("loss over an empty prediction set")
    diff = sub(pred, Tensor(target))
    return scale(total(mul(diff, diff)), 0.5 / pred.shape[0])
