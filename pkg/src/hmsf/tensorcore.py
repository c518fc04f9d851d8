"""Numerical kernels: sparse operators, a reverse-mode tape, losses, Adam.

Everything runs in 64-bit floats.  Dense matrices are plain C-contiguous
float64 ndarrays wrapped in :class:`Tensor` nodes; sparse aggregation
operators are CSR matrices wrapped in :class:`SparseOperator`.  The tape
records one backward closure per primitive and replays them in exact
reverse order of recording.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from hmsf.graphdata import Graph, Hoods

try:  # optional: row-parallel SpMM for large operators
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

LOG_CLAMP = 1e-12

# scipy's single-threaded kernel is fine below this many multiply-adds
_PARALLEL_SPMM_THRESHOLD = 4_000_000

if HAVE_NUMBA:

    @numba.njit(parallel=True, cache=True)
    def _spmm_rows(indptr, indices, data, dense, out):
        # Each output row is owned by one thread and accumulated in storage
        # order, so the result is bitwise identical to the serial kernel
        # for any thread count.
        for i in numba.prange(indptr.shape[0] - 1):
            for k in range(indptr[i], indptr[i + 1]):
                v = data[k]
                col = indices[k]
                for j in range(dense.shape[1]):
                    out[i, j] += v * dense[col, j]


def _check_finite(a: np.ndarray, what: str):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values produced by {what}")


class SparseOperator:
    """An n-by-n aggregation operator in CSR form (column ids sorted).

    ``symmetric`` marks operators whose value matrix equals its transpose
    exactly (all the graph normalizers); their backward product reuses the
    forward kernel.
    """

    __slots__ = ("num_rows", "indptr", "indices", "data", "symmetric", "_csr")

    def __init__(self, indptr, indices, data, num_rows: int, symmetric: bool = False):
        self.num_rows = int(num_rows)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)
        self.symmetric = bool(symmetric)
        _check_finite(self.data, "sparse operator values")
        self._csr = sp.csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.num_rows, self.num_rows)
        )

    @classmethod
    def from_scipy(cls, m, symmetric: bool = False) -> "SparseOperator":
        m = sp.csr_matrix(m)
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, m.shape[0], symmetric=symmetric)

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def matmat(self, x: np.ndarray) -> np.ndarray:
        if HAVE_NUMBA and self.nnz * x.shape[1] >= _PARALLEL_SPMM_THRESHOLD:
            out = np.zeros((self.num_rows, x.shape[1]))
            _spmm_rows(self.indptr, self.indices, self.data, np.ascontiguousarray(x), out)
            return out
        return self._csr @ x

    def rmatmat(self, g: np.ndarray) -> np.ndarray:
        """Transpose product, used by spmm's backward pass."""
        if self.symmetric:
            return self.matmat(g)
        return self._csr.T @ g

    def todense(self) -> np.ndarray:
        return self._csr.toarray()


def closed_adjacency(g: Graph):
    """CSR pattern (indptr, indices) over N_1(v) union {v}, rows sorted."""
    n = g.num_nodes
    row = np.concatenate([np.arange(n, dtype=np.int64), g.edges[:, 0], g.edges[:, 1]])
    col = np.concatenate([np.arange(n, dtype=np.int64), g.edges[:, 1], g.edges[:, 0]])
    m = sp.csr_matrix((np.ones(row.size), (row, col)), shape=(n, n))
    m.sort_indices()
    return m.indptr.astype(np.int64), m.indices.astype(np.int64)


def gcn_normalize(g: Graph) -> SparseOperator:
    """Self-loop-augmented symmetric normalization over N_1(v) union {v}.

    Entry (v, u) is (d_v + 1)^{-1/2} (d_u + 1)^{-1/2}; an isolated node
    keeps only its diagonal entry with value 1.
    """
    n = g.num_nodes
    dinv = 1.0 / np.sqrt(g.degrees + 1.0)
    indptr, indices = closed_adjacency(g)
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
    data = dinv[rows] * dinv[indices]
    return SparseOperator(indptr, indices, data, n, symmetric=True)


def h2gcn_normalize(hoods: Hoods, depth: int) -> SparseOperator:
    """Symmetric normalization over N_i(v), with no diagonal entries.

    Entry (v, u) is d_{v,i}^{-1/2} d_{u,i}^{-1/2}; rows of nodes with no
    depth-i neighbors stay empty, so their aggregate is the zero vector.
    """
    if depth == 1:
        indptr, indices, d = hoods.n1_indptr, hoods.n1_indices, hoods.d1
    elif depth == 2:
        indptr, indices, d = hoods.n2_indptr, hoods.n2_indices, hoods.d2
    else:
        raise ValueError(f"depth must be 1 or 2, got {depth}")
    n = len(d)
    with np.errstate(divide="ignore"):
        dinv = np.where(d > 0, 1.0 / np.sqrt(np.maximum(d, 1)), 0.0)
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
    data = dinv[rows] * dinv[indices]
    return SparseOperator(indptr, indices, data, n, symmetric=True)


class Tensor:
    """A value node on the tape; gradients accumulate into ``grad``."""

    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value, needs_grad: bool = False):
        v = np.asarray(value, dtype=np.float64)
        _check_finite(v, "tensor construction")
        self.value = v
        self.grad = None
        self.needs_grad = bool(needs_grad)

    @property
    def shape(self):
        return self.value.shape

    def add_grad(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self):
        self.grad = None


def parameter(value) -> Tensor:
    return Tensor(value, needs_grad=True)


class Tape:
    """Recorded primitive ops; backward replays them newest-first."""

    def __init__(self):
        self._backward_fns = []

    def record(self, fn):
        self._backward_fns.append(fn)

    def backward(self):
        for fn in reversed(self._backward_fns):
            fn()

    def __len__(self):
        return len(self._backward_fns)


def _result(tape: Tape | None, value: np.ndarray, needs_grad: bool, backward) -> Tensor:
    out = Tensor(value, needs_grad=needs_grad)
    if tape is not None and needs_grad:
        tape.record(backward(out))
    return out


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    def backward(out):
        def fn():
            if out.grad is None:
                return
            if a.needs_grad:
                a.add_grad(out.grad @ b.value.T)
            if b.needs_grad:
                b.add_grad(a.value.T @ out.grad)

        return fn

    return _result(tape, a.value @ b.value, a.needs_grad or b.needs_grad, backward)


def spmm(tape: Tape | None, op: SparseOperator, x: Tensor) -> Tensor:
    """Sparse-operator times dense matrix."""
    if x.value.shape[0] != op.num_rows:
        raise ValueError(f"operator is {op.num_rows}x{op.num_rows}, input has {x.value.shape[0]} rows")

    def backward(out):
        def fn():
            if out.grad is not None and x.needs_grad:
                x.add_grad(op.rmatmat(out.grad))

        return fn

    return _result(tape, op.matmat(x.value), x.needs_grad, backward)


def add_bias(tape: Tape | None, x: Tensor, b: Tensor) -> Tensor:
    def backward(out):
        def fn():
            if out.grad is None:
                return
            if x.needs_grad:
                x.add_grad(out.grad)
            if b.needs_grad:
                b.add_grad(out.grad.sum(axis=0))

        return fn

    return _result(tape, x.value + b.value, x.needs_grad or b.needs_grad, backward)


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    mask = x.value > 0

    def backward(out):
        def fn():
            if out.grad is not None and x.needs_grad:
                x.add_grad(out.grad * mask)

        return fn

    return _result(tape, x.value * mask, x.needs_grad, backward)


def identity(tape: Tape | None, x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "none": identity}


def concat_cols(tape: Tape | None, parts: list[Tensor]) -> Tensor:
    widths = [p.value.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def backward(out):
        def fn():
            if out.grad is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.needs_grad:
                    p.add_grad(out.grad[:, lo:hi])

        return fn

    value = np.concatenate([p.value for p in parts], axis=1)
    return _result(tape, value, any(p.needs_grad for p in parts), backward)


def dropout(tape: Tape | None, x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.value.shape) >= rate
    scale = 1.0 / (1.0 - rate)

    def backward(out):
        def fn():
            if out.grad is not None and x.needs_grad:
                x.add_grad(out.grad * keep * scale)

        return fn

    return _result(tape, x.value * keep * scale, x.needs_grad, backward)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction; plain function, no tape."""
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(tape: Tape | None, x: Tensor) -> Tensor:
    p = softmax(x.value)

    def backward(out):
        def fn():
            if out.grad is not None and x.needs_grad:
                g = out.grad
                x.add_grad(p * (g - (g * p).sum(axis=1, keepdims=True)))

        return fn

    return _result(tape, p, x.needs_grad, backward)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Mean negative log-likelihood over ``mask``.

    ``pred`` must be row-stochastic (softmax output); rows are clamped at
    1e-12 before the log.  Returns (loss, gradient w.r.t. the logits),
    the gradient being (softmax - one_hot) / |mask| on masked rows.
    """
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("cross entropy over an empty mask")
    rows = pred[mask]
    y = labels[mask]
    picked = np.clip(rows[np.arange(len(y)), y], LOG_CLAMP, None)
    loss = float(-np.log(picked).mean())
    grad = np.zeros_like(pred)
    grad[mask] = (rows - one_hot(y, pred.shape[1])) / len(y)
    return loss, grad


def l2_distill_loss(student: np.ndarray, teacher: np.ndarray, mask: np.ndarray):
    """Sum over masked rows of the Euclidean distance to the teacher row.

    The subgradient at an exactly matching row is zero.  Returns
    (loss, gradient w.r.t. the student matrix).
    """
    if student.shape != teacher.shape:
        raise ValueError("student and teacher prediction shapes differ")
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("distillation loss over an empty mask")
    diff = student[mask] - teacher[mask]
    norms = np.sqrt((diff * diff).sum(axis=1))
    loss = float(norms.sum())
    grad = np.zeros_like(student)
    nz = norms > 0
    grad_rows = np.zeros_like(diff)
    grad_rows[nz] = diff[nz] / norms[nz, None]
    grad[mask] = grad_rows
    return loss, grad


def glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class AdamState:
    """Adam moments plus hyperparameters (beta1=0.9, beta2=0.999, eps=1e-8).

    Weight decay is the classic gradient-coupled L2 term: wd * param is
    added to the gradient before the moment updates.
    """

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """Apply one Adam update in place; ``params`` maps names to Tensors."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.value.shape} for {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = state.m[name] / (1 - b1**state.t)
        v_hat = state.v[name] / (1 - b2**state.t)
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        _check_finite(p.value, f"adam update of {name!r}")
    return params, state
