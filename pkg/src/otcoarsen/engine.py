"""Dense reverse-mode automatic differentiation over 64-bit matrices.

Every value is a 2-D float64 array wrapped in a :class:`Tensor`; vectors are
column matrices, scalars are 1x1.  Operations record their inputs so that
:func:`backward` can run a reverse sweep from a scalar output.  The value
graph is rebuilt on every forward evaluation; tensors are immutable once
produced and safe to share read-only between evaluations.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DomainError, ShapeError

# Division guard: Sinkhorn denominators Kv can underflow for stiff kernels.
EPS_DIV = 1e-30
# Rows with l1 mass at or below this are treated as structurally zero.
EPS_ROW = 1e-12


def _as_matrix(data) -> np.ndarray:
    """Coerce input to a fresh 2-D float64 array; 1-D input becomes a column."""
    arr = np.array(data, dtype=np.float64, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Tensor:
    """A matrix value participating in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value: np.ndarray, parents: tuple = (), backward_fn=None):
        self.value = value
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = parents
        self._backward: Callable[[np.ndarray], None] | None = backward_fn

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def gradient(self) -> np.ndarray:
        """Gradient of the last backward target; zeros if never reached."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Create a leaf tensor (parameter or constant)."""
    return Tensor(_as_matrix(data))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: operand shapes {a.shape} and {b.shape} differ")


def _first_offender(mask: np.ndarray) -> tuple[int, int]:
    idx = np.argwhere(mask)
    return tuple(int(v) for v in idx[0])


# ---------------------------------------------------------------------------
# binary elementwise and matrix ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return Tensor(a.value + b.value, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return Tensor(a.value - b.value, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    av, bv = a.value, b.value

    def bw(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return Tensor(av * bv, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    bad = np.abs(b.value) <= EPS_DIV
    if bad.any():
        raise DomainError(f"div: near-zero denominator at index {_first_offender(bad)}")
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        _accum(a, g / bv)
        _accum(b, -g * out / bv)

    return Tensor(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value

    def bw(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    return Tensor(av @ bv, (a, b), bw)


def sparse_matmul(a: sp.spmatrix, x: Tensor) -> Tensor:
    """Product of a constant sparse matrix with a tensor; gradients flow to x only."""
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: inner dimensions of {a.shape} and {x.shape} differ")
    at = a.T.tocsr()

    def bw(g):
        _accum(x, at @ g)

    return Tensor(np.asarray(a @ x.value), (x,), bw)


# ---------------------------------------------------------------------------
# unary elementwise ops
# ---------------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)

    def bw(g):
        _accum(x, g * out)

    return Tensor(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    bad = x.value <= 0.0
    if bad.any():
        raise DomainError(f"log: non-positive entry at index {_first_offender(bad)}")
    xv = x.value

    def bw(g):
        _accum(x, g / xv)

    return Tensor(np.log(xv), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xv = x.value
    # exp only of non-positive arguments: stable for large |x|
    out = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.abs(xv))),
                   np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return Tensor(out, (x,), bw)


def square(x: Tensor) -> Tensor:
    xv = x.value

    def bw(g):
        _accum(x, 2.0 * g * xv)

    return Tensor(xv * xv, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def bw(g):
        _accum(x, g * mask)

    return Tensor(np.where(mask, x.value, 0.0), (x,), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(x, g * c)

    return Tensor(x.value * c, (x,), bw)


def power(x: Tensor, q: float) -> Tensor:
    """Entrywise x**q for x >= 0; subgradient 0 at x == 0 when q < 1."""
    bad = x.value < 0.0
    if bad.any():
        raise DomainError(f"power: negative entry at index {_first_offender(bad)}")
    q = float(q)
    xv = x.value

    def bw(g):
        slope = np.where(xv > 0, q * xv ** (q - 1.0), 0.0)
        _accum(x, g * slope)

    return Tensor(xv ** q, (x,), bw)


def clamp_min(x: Tensor, c: float) -> Tensor:
    mask = x.value > c

    def bw(g):
        _accum(x, g * mask)

    return Tensor(np.where(mask, x.value, c), (x,), bw)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def transpose(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g.T)

    return Tensor(x.value.T.copy(), (x,), bw)


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    idx = [int(i) for i in indices]
    n = x.shape[0]
    for i in idx:
        if not 0 <= i < n:
            raise IndexError(f"gather_rows: row {i} out of range for {x.shape}")

    def bw(g):
        buf = np.zeros_like(x.value)
        for pos, i in enumerate(idx):
            buf[i, :] += g[pos, :]
        _accum(x, buf)

    return Tensor(x.value[idx, :].copy(), (x,), bw)


def gather_cols(x: Tensor, indices: Sequence[int]) -> Tensor:
    idx = [int(j) for j in indices]
    m = x.shape[1]
    for j in idx:
        if not 0 <= j < m:
            raise IndexError(f"gather_cols: column {j} out of range for {x.shape}")

    def bw(g):
        buf = np.zeros_like(x.value)
        for pos, j in enumerate(idx):
            buf[:, j] += g[:, pos]
        _accum(x, buf)

    return Tensor(x.value[:, idx].copy(), (x,), bw)


def row_normalize_l1(x: Tensor, zero_row_policy: str = "keep") -> Tensor:
    """Divide each row by its sum; rows with sum <= EPS_ROW stay all-zero.

    Requires nonnegative entries. The division is differentiated; zero rows
    get subgradient zero.
    """
    if zero_row_policy != "keep":
        raise ContractError(f"unsupported zero_row_policy {zero_row_policy!r}")
    bad = x.value < 0.0
    if bad.any():
        raise DomainError(f"row_normalize_l1: negative entry at index {_first_offender(bad)}")
    sums = x.value.sum(axis=1, keepdims=True)
    live = sums > EPS_ROW
    safe = np.where(live, sums, 1.0)
    out = np.where(live, x.value / safe, 0.0)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        _accum(x, np.where(live, (g - dot) / safe, 0.0))

    return Tensor(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_nonempty(x: Tensor, opname: str) -> None:
    if x.value.size == 0:
        raise DomainError(f"{opname}: empty operand")


def reduce_sum(x: Tensor) -> Tensor:
    _check_nonempty(x, "reduce_sum")

    def bw(g):
        _accum(x, np.full_like(x.value, g[0, 0]))

    return Tensor(np.array([[x.value.sum()]]), (x,), bw)


def col_mean(x: Tensor) -> Tensor:
    """Mean over rows, one entry per column (1 x cols)."""
    _check_nonempty(x, "col_mean")
    rows = x.shape[0]

    def bw(g):
        _accum(x, np.broadcast_to(g / rows, x.shape).copy())

    return Tensor(x.value.mean(axis=0, keepdims=True), (x,), bw)


def col_max(x: Tensor) -> Tensor:
    """Max over rows, one entry per column; subgradient routes to the first
    attaining row of each column."""
    _check_nonempty(x, "col_max")
    arg = np.argmax(x.value, axis=0)

    def bw(g):
        buf = np.zeros_like(x.value)
        np.add.at(buf, (arg, np.arange(x.shape[1])), g[0, :])
        _accum(x, buf)

    return Tensor(x.value.max(axis=0, keepdims=True), (x,), bw)


def inner(a: Tensor, b: Tensor) -> Tensor:
    """Frobenius inner product <A, B> as a 1x1 tensor."""
    _check_same_shape(a, b, "inner")
    _check_nonempty(a, "inner")
    av, bv = a.value, b.value

    def bw(g):
        _accum(a, g[0, 0] * bv)
        _accum(b, g[0, 0] * av)

    return Tensor(np.array([[float(np.sum(av * bv))]]), (a, b), bw)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def _topo_order(out: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order  # inputs precede consumers; out is last


def backward(out: Tensor) -> None:
    """Reverse sweep from a scalar output; resets gradients of every tensor
    reachable from it before accumulating fresh ones."""
    if out.shape != (1, 1):
        raise ContractError(f"backward requires a 1x1 scalar output, got shape {out.shape}")
    order = _topo_order(out)
    for node in order:
        node.grad = None
    out.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor],
                      h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` must rebuild the scalar output from the current parameter values on
    every call. The error per entry is |analytic - fd| / max(1, |analytic|).
    """
    if h <= 0:
        raise ContractError("finite_diff_check requires h > 0")
    params = list(params)
    out = f()
    if not np.isfinite(out.value).all():
        raise DomainError("finite_diff_check: non-finite objective value")
    backward(out)
    analytic = [p.gradient.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise DomainError("finite_diff_check: non-finite objective under perturbation")
            fd = (up - down) / (2.0 * h)
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
