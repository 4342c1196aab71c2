"""Dense reverse-mode differentiation on float64 numpy arrays.

A :class:`Tensor` produced by an op remembers its parents and a backward
rule; :func:`backward` walks that dynamic tape in reverse topological order.
Graphs are rebuilt on every forward pass, so shapes may change per sample.

Subgradient conventions: ``relu`` and ``hinge`` pass gradient only where the
input is strictly positive; ``l2_norm_rows`` uses ``x / max(|x|, 1e-12)``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

NORM_EPS = 1e-12

_grad_enabled = True
# working precision of the attention kernel; see ``attention_precision``
_attention_dtype = np.float64


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def attention_precision(dtype) -> Iterator[None]:
    """Run ``attention`` forward and backward in ``dtype`` inside the block.

    Inputs and results stay float64; only the score blocks and their products
    use the working precision. Training uses float32 here for speed; gradient
    checks and evaluation keep the float64 default.
    """
    global _attention_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"attention precision must be float32 or float64, got {dtype}")
    prev = _attention_dtype
    _attention_dtype = dtype.type
    try:
        yield
    finally:
        _attention_dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_saved", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._saved: tuple = ()
        self._bw: Callable | None = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._bw is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], bw: Callable, saved: tuple = ()) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._saved = saved
        out._bw = bw
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls; reset with ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._bw(g, *node._saved)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- broadcasting helpers -------------------------------------------------

def _check_broadcast(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    trimmed = small
    while trimmed and trimmed[0] == 1:
        trimmed = trimmed[1:]
    if len(trimmed) <= len(big) and big[len(big) - len(trimmed):] == trimmed:
        return big
    raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible over leading dims")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _need_2d(op: str, x: Tensor) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D tensor, got shape {x.shape}")


# --- elementwise -----------------------------------------------------------

def _add_bw(g, a_shape, b_shape):
    return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    return _record("add", a.data + b.data, (a, b), _add_bw, (a.shape, b.shape))


def _sub_bw(g, a_shape, b_shape):
    return _unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    return _record("sub", a.data - b.data, (a, b), _sub_bw, (a.shape, b.shape))


def _mul_bw(g, a, b):
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    return _record("mul", a.data * b.data, (a, b), _mul_bw, (a, b))


def _scalar_mul_bw(g, c):
    return (g * c,)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scalar_mul", x.data * c, (x,), _scalar_mul_bw, (c,))


def _relu_bw(g, x):
    return (g * (x.data > 0),)


def relu(x: Tensor) -> Tensor:
    return _record("relu", np.maximum(x.data, 0.0), (x,), _relu_bw, (x,))


def _hinge_bw(g, x):
    return (g * (x.data > 0),)


def hinge(x: Tensor) -> Tensor:
    """``max(x, 0)`` elementwise; the ``[.]_+`` of margin losses."""
    return _record("hinge", np.maximum(x.data, 0.0), (x,), _hinge_bw, (x,))


def _square_bw(g, x):
    return (2.0 * g * x.data,)


def square(x: Tensor) -> Tensor:
    return _record("square", x.data * x.data, (x,), _square_bw, (x,))


# --- linear algebra --------------------------------------------------------

def _matmul_bw(g, a, b):
    ga = g @ b.data.T if a.requires_grad else None
    gb = a.data.T @ g if b.requires_grad else None
    return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b), _matmul_bw, (a, b))


def _transpose_bw(g):
    return (g.T,)


def transpose(x: Tensor) -> Tensor:
    _need_2d("transpose", x)
    return _record("transpose", x.data.T, (x,), _transpose_bw)


# --- row-wise normalizations ------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _row_softmax_bw(g, y):
    return (y * (g - np.einsum("ij,ij->i", g, y)[:, None]),)


def row_softmax(x: Tensor) -> Tensor:
    _need_2d("row_softmax", x)
    y = _softmax(x.data.copy())
    return _record("row_softmax", y, (x,), _row_softmax_bw, (y,))


def _row_log_softmax_bw(g, y):
    return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)


def row_log_softmax(x: Tensor) -> Tensor:
    _need_2d("row_log_softmax", x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return _record("row_log_softmax", y, (x,), _row_log_softmax_bw, (y,))


def _l2_norm_rows_bw(g, x, n):
    return (g[:, None] * x.data / np.maximum(n, NORM_EPS)[:, None],)


def l2_norm_rows(x: Tensor) -> Tensor:
    _need_2d("l2_norm_rows", x)
    n = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))
    return _record("l2_norm_rows", n, (x,), _l2_norm_rows_bw, (x, n))


# --- attention ---------------------------------------------------------------

# score-block budget in bytes; a block of query rows should stay cache-resident
ATTENTION_BLOCK_BYTES = 1 << 22


def _attention_rows(n_keys: int) -> int:
    return max(8, ATTENTION_BLOCK_BYTES // (8 * max(n_keys, 1)))


def _attention_bw(g, q, k, v, out, dtype):
    qd, kd, vd = (t.data.astype(dtype, copy=False) for t in (q, k, v))
    g, out = g.astype(dtype, copy=False), out.astype(dtype, copy=False)
    gq = np.empty_like(qd) if q.requires_grad else None
    gk = np.zeros_like(kd) if k.requires_grad else None
    gv = np.zeros_like(vd) if v.requires_grad else None
    rows = _attention_rows(kd.shape[0])
    for s in range(0, qd.shape[0], rows):
        qb, gb = qd[s:s + rows], g[s:s + rows]
        # scores are recomputed rather than stored
        a = _softmax(qb @ kd.T)
        if gv is not None:
            gv += a.T @ gb
        ds = gb @ vd.T
        ds -= np.einsum("ij,ij->i", gb, out[s:s + rows])[:, None]
        ds *= a
        if gq is not None:
            gq[s:s + rows] = ds @ kd
        if gk is not None:
            gk += ds.T @ qb
    return tuple(None if x is None else x.astype(np.float64, copy=False) for x in (gq, gk, gv))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``row_softmax(q k^T) v`` evaluated in blocks of query rows, so the full
    score matrix is never held in memory."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    for name, t in (("q", q), ("k", k), ("v", v)):
        _need_2d(f"attention {name}", t)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not line up")
    dtype = _attention_dtype
    qd, kd, vd = (t.data.astype(dtype, copy=False) for t in (q, k, v))
    out = np.empty((qd.shape[0], vd.shape[1]), dtype=dtype)
    rows = _attention_rows(kd.shape[0])
    for s in range(0, qd.shape[0], rows):
        out[s:s + rows] = _softmax(qd[s:s + rows] @ kd.T) @ vd
    return _record("attention", out.astype(np.float64, copy=False), (q, k, v), _attention_bw, (q, k, v, out, dtype))


# --- reductions ------------------------------------------------------------

def _mean_rows_bw(g, n):
    return (np.broadcast_to(g / n, (n, g.shape[1])).copy(),)


def mean_rows(x: Tensor) -> Tensor:
    """Column means of a p x q tensor, kept as a 1 x q row."""
    _need_2d("mean_rows", x)
    if x.shape[0] == 0:
        raise ShapeError("mean_rows: empty tensor")
    return _record("mean_rows", x.data.mean(axis=0, keepdims=True), (x,), _mean_rows_bw, (x.shape[0],))


def _mean_all_bw(g, shape):
    return (np.full(shape, float(g) / max(int(np.prod(shape)), 1)),)


def mean_all(x: Tensor) -> Tensor:
    return _record("mean_all", np.asarray(x.data.mean()), (x,), _mean_all_bw, (x.shape,))


def _sum_all_bw(g, shape):
    return (np.full(shape, float(g)),)


def sum_all(x: Tensor) -> Tensor:
    return _record("sum_all", np.asarray(x.data.sum()), (x,), _sum_all_bw, (x.shape,))


# --- indexing --------------------------------------------------------------

def _concat_rows_bw(g, sizes):
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=0))


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ShapeError("concat_rows: nothing to concatenate")
    widths = {x.shape[1:] for x in xs}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: mismatched trailing shapes {sorted(widths)}")
    data = np.concatenate([x.data for x in xs], axis=0)
    return _record("concat_rows", data, xs, _concat_rows_bw, ([x.shape[0] for x in xs],))


def _row_sum_matrix(ids: np.ndarray, n_out: int) -> sp.csr_matrix:
    n = ids.shape[0]
    return sp.csr_matrix((np.ones(n), (ids, np.arange(n))), shape=(n_out, n))


def _gather_rows_bw(g, idx, n):
    if g.ndim == 1:
        return (np.bincount(idx, weights=g, minlength=n).astype(np.float64),)
    return (np.asarray(_row_sum_matrix(idx, n) @ g),)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    return _record("gather_rows", x.data[idx], (x,), _gather_rows_bw, (idx, n))


def _scatter_mean_rows_bw(g, ids, counts):
    return ((g / counts[:, None])[ids],)


def scatter_mean_rows(x: Tensor, ids, m: int) -> Tensor:
    """Row ``k`` of the result is the mean of rows of ``x`` whose id is ``k``.

    Groups with no rows yield zeros.
    """
    _need_2d("scatter_mean_rows", x)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter_mean_rows: {ids.shape[0]} ids for {x.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= m):
        raise ShapeError(f"scatter_mean_rows: ids out of range for {m} groups")
    counts = np.bincount(ids, minlength=m).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    # mean = ref + mean(x - ref) with ref a member row: exact for constant groups
    ref = np.zeros((m, x.shape[1]))
    ref[ids[::-1]] = x.data[::-1]
    dev = np.asarray(_row_sum_matrix(ids, m) @ (x.data - ref[ids]))
    return _record("scatter_mean_rows", ref + dev / safe[:, None], (x,), _scatter_mean_rows_bw, (ids, safe))


def _take_per_row_bw(g, cols, shape):
    out = np.zeros(shape)
    out[np.arange(shape[0]), cols] = g
    return (out,)


def take_per_row(x: Tensor, cols) -> Tensor:
    """Pick ``x[i, cols[i]]`` for every row ``i``."""
    _need_2d("take_per_row", x)
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (x.shape[0],):
        raise ShapeError(f"take_per_row: {cols.shape} column ids for {x.shape[0]} rows")
    return _record("take_per_row", x.data[np.arange(x.shape[0]), cols], (x,), _take_per_row_bw, (cols, x.shape))


# --- finite-difference checking ---------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    skipped: list[tuple[int, int]] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


# below this magnitude the error is effectively absolute: central differences
# carry ~1e-10 roundoff at h=1e-6, which would swamp a purely relative test
REL_ERROR_FLOOR = 1e-4


def rel_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERROR_FLOOR)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-6,
    kink_tol: float = 1e-3,
    only: Sequence[int] | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of scalar ``f`` against central differences.

    A coordinate where the forward and backward one-sided slopes disagree by
    more than ``kink_tol * max(1, |slope|)`` straddles a non-differentiable
    point and is reported in ``skipped`` instead of being scored.
    ``only`` restricts checking to the listed input positions.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in arrays]
    out = f(*leaves)
    f0 = float(out.data)
    if not np.isfinite(f0):
        raise FloatingPointError("grad_check: f is not finite at the base point")
    backward(out)

    def evaluate() -> float:
        with no_grad():
            val = float(f(*[Tensor(x) for x in arrays]).data)
        if not np.isfinite(val):
            raise FloatingPointError("grad_check: f is not finite at a perturbed point")
        return val

    worst = 0.0
    checked = 0
    skipped: list[tuple[int, int]] = []
    targets = range(len(arrays)) if only is None else only
    for k in targets:
        x = arrays[k]
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(x)
        flat = x.reshape(-1)
        agrad = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            # divide by the steps actually taken after rounding x +/- h
            flat[i] = orig + h
            hp = flat[i] - orig
            fp = evaluate()
            flat[i] = orig - h
            hm = orig - flat[i]
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (hp + hm)
            fwd, bwd = (fp - f0) / hp, (f0 - fm) / hm
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(num)):
                skipped.append((k, i))
                continue
            worst = max(worst, float(rel_error(agrad[i], num)))
            checked += 1
    return GradCheckResult(worst, checked, skipped)
