"""Tape-based reverse-mode differentiation over dense float64 arrays.

Only the primitives needed by the GCN, GIN and GAT layers and the training
loss live here. Every primitive computes its forward value with numpy,
appends one node to the active :class:`Tape` and registers a vector-Jacobian
product used by :func:`backward`.

Example::

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    loss = sum_all(mul(x, x))
    grads = backward(tape, loss)   # grads[x] == [2, 4]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NumericFault(FloatingPointError):
    """A NaN or Inf appeared in a forward value or gradient."""


class Tensor:
    """A dense float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "is_leaf", "name")

    def __init__(self, data, tape: Tape | None = None, is_leaf: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.is_leaf = is_leaf
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, tracked={self.tape is not None})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    With ``debug=True`` every forward value is checked for NaN/Inf as soon as
    it is produced; otherwise callers are expected to check the loss (the
    search loops do this once per epoch).
    """

    debug: bool = False
    nodes: list[_Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    def leaf(self, data, name: str = "") -> Tensor:
        t = Tensor(data, tape=self, is_leaf=True, name=name)
        self.leaves.append(t)
        return t

    def _record(self, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
        if self.debug and not np.all(np.isfinite(out)):
            raise NumericFault("non-finite value produced by a primitive")
        t = Tensor(out, tape=self)
        self.nodes.append(_Node(t, inputs, vjp))
        return t

    def release(self) -> None:
        """Drop recorded nodes so the tensor/tape reference cycles can be freed promptly."""
        self.nodes.clear()
        self.leaves.clear()


def constant(data) -> Tensor:
    return Tensor(data)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = x.tape
    return tape


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape._record(out, inputs, vjp)


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix with constant real values.

    Column indices are sorted within each row. A scipy view of the same
    buffers is kept for the products.
    """

    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must be monotone")
        if len(self.col_idx) != len(self.values) or self.row_ptr[-1] != len(self.values):
            raise ValueError("row_ptr, col_idx and values disagree on nnz")
        if not np.all(np.isfinite(self.values)):
            raise NumericFault("non-finite CSR value")
        m = sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)
        if not m.has_sorted_indices:
            raise ValueError("col_idx must be sorted within each row")
        object.__setattr__(self, "_sp", m)
        object.__setattr__(self, "_spT", m.T.tocsr())
        object.__setattr__(self, "_rows", np.repeat(np.arange(self.shape[0]), np.diff(self.row_ptr)))

    @classmethod
    def from_scipy(cls, m) -> CsrMatrix:
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data.copy(), m.shape)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def rows(self) -> np.ndarray:
        """Row index of every stored entry."""
        return self._rows

    def to_scipy(self):
        return self._sp

    def to_dense(self) -> np.ndarray:
        return self._sp.toarray()

    def with_values(self, values) -> CsrMatrix:
        return CsrMatrix(self.row_ptr, self.col_idx, np.asarray(values, dtype=np.float64), self.shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def vjp(g):
        return (g * keep,)

    return _emit(np.where(keep, x.data, 0.0), (x,), vjp)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope)

    def vjp(g):
        return (g * factor,)

    return _emit(x.data * factor, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def vjp(g):
        return g, g

    return _emit(a.data + b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g * B, g * A

    return _emit(A * B, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _emit(x.data * c, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _emit(np.array(x.data.sum()), (x,), vjp)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols row mismatch: {a.shape} | {b.shape}")
    k = a.shape[1]

    def vjp(g):
        return g[:, :k], g[:, k:]

    return _emit(np.concatenate([a.data, b.data], axis=1), (a, b), vjp)


def take_rows(x: Tensor, idx) -> Tensor:
    """``x[idx]`` along the first axis; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(x.data[idx], (x,), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero each entry with probability ``p``, rescale the rest."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def vjp(g):
        return (g * keep,)

    return _emit(x.data * keep, (x,), vjp)


def spmm(adj: CsrMatrix, x: Tensor) -> Tensor:
    """``adj @ x`` with a constant sparse left operand."""
    if x.data.ndim != 2 or adj.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {adj.shape} @ {x.shape}")

    def vjp(g):
        return (adj._spT @ g,)

    return _emit(adj._sp @ x.data, (x,), vjp)


def weighted_spmm(adj: CsrMatrix, weights: Tensor, x: Tensor) -> Tensor:
    """``W @ x`` where ``W`` has the sparsity pattern of ``adj`` and stored values ``weights``."""
    if weights.shape != (adj.nnz,):
        raise ShapeError(f"expected {adj.nnz} edge weights, got {weights.shape}")
    if x.data.ndim != 2 or adj.shape[1] != x.shape[0]:
        raise ShapeError(f"weighted_spmm shape mismatch: {adj.shape} @ {x.shape}")
    W = sp.csr_matrix((weights.data, adj.col_idx, adj.row_ptr), shape=adj.shape)
    X = x.data
    rows, cols = adj.rows, adj.col_idx

    def vjp(g):
        g_w = np.einsum("ek,ek->e", g[rows], X[cols])
        return g_w, W.T @ g

    return _emit(W @ X, (weights, x), vjp)


def edge_softmax(scores: Tensor, adj: CsrMatrix) -> Tensor:
    """Softmax of per-edge scores within each row of ``adj``."""
    if scores.shape != (adj.nnz,):
        raise ShapeError(f"expected {adj.nnz} edge scores, got {scores.shape}")
    rows, n = adj.rows, adj.shape[0]
    s = scores.data
    row_max = np.full(n, -np.inf)
    np.maximum.at(row_max, rows, s)
    e = np.exp(s - row_max[rows])
    denom = np.bincount(rows, weights=e, minlength=n)
    alpha = e / denom[rows]

    def vjp(g):
        dot = np.bincount(rows, weights=alpha * g, minlength=n)
        return (alpha * (g - dot[rows]),)

    return _emit(alpha, (scores,), vjp)


def softmax_cross_entropy(logits: Tensor, labels, idx) -> Tensor:
    """Mean negative log-likelihood of ``labels[idx]`` under row softmax of ``logits[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("softmax_cross_entropy needs at least one node")
    labels = np.asarray(labels, dtype=np.int64)
    Z = logits.data[idx]
    y = labels[idx]
    if np.any(y < 0) or np.any(y >= Z.shape[1]):
        raise ValueError("label outside the logit range")
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -logp[np.arange(len(idx)), y].mean()
    shape = logits.shape

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(len(idx)), y] -= 1.0
        out = np.zeros(shape)
        np.add.at(out, idx, p * (float(g) / len(idx)))
        return (out,)

    return _emit(np.array(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf of ``tape``.

    Leaves that do not influence the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp.tape is None or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        if tape.debug and not np.all(np.isfinite(out[leaf])):
            raise NumericFault(f"non-finite gradient for leaf {leaf.name!r}")
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-4) -> float:
    """Largest relative disagreement between reverse-mode and central-difference gradients.

    ``f`` receives a tracked leaf and must return a scalar tensor built from
    the primitives above.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x)
    g_ad = backward(tape, f(leaf))[leaf]
    g_fd = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(f(Tensor(x)).data)
        flat[i] = old - eps
        lo = float(f(Tensor(x)).data)
        flat[i] = old
        g_fd.reshape(-1)[i] = (hi - lo) / (2 * eps)
    err = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(err.max()) if err.size else 0.0
