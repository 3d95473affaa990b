"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a backward rule on the output tensor; the
graph built this way is the tape.  ``backward(loss)`` walks it in reverse
topological order once, accumulates gradients into leaves that require them
and then releases the tape, so a second call on the same loss raises.

Shapes are explicit: apart from adding a bias row to a matrix there is no
broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class TapeError(RuntimeError):
    """Misuse of the tape: non-scalar loss, or backward through a consumed graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self._consumed = False
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other) if other.data.ndim else mul_scalar(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Record a node only if some input needs a gradient."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _index_matrix(idx: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse (n, len(idx)) matrix M with M[idx[k], k] = 1, so M @ v index-adds rows."""
    m = len(idx)
    return sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2, f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    _check(a.shape[1] == b.shape[0], f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def spmm(adj, x: Tensor) -> Tensor:
    """Constant (sparse or dense) matrix times tensor; only ``x`` is differentiated."""
    _check(x.data.ndim == 2 and adj.shape[1] == x.shape[0], f"spmm shape mismatch {adj.shape} @ {x.shape}")
    adj_t = adj.T

    def backward(g):
        return (np.asarray(adj_t @ g),)

    return _make(np.asarray(adj @ x.data), (x,), backward, "spmm")


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b with equal shapes, or a (n, d) matrix plus a (d,) bias row."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    _check(
        a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0],
        f"add shape mismatch {a.shape} + {b.shape}",
    )
    return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"sub shape mismatch {a.shape} - {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"mul shape mismatch {a.shape} * {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Tensor times a differentiable scalar of shape ()."""
    _check(s.data.shape == (), f"mul_scalar needs a shape-() scalar, got {s.shape}")
    return _make(a.data * s.data, (a, s), lambda g: (g * s.data, np.sum(g * a.data)), "mul_scalar")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def mul_rows(x: Tensor, w: Tensor) -> Tensor:
    """Scale row i of an (n, d) tensor by w[i], with w of shape (n,)."""
    _check(x.data.ndim == 2 and w.shape == (x.shape[0],), f"mul_rows shape mismatch {x.shape}, {w.shape}")

    def backward(g):
        return g * w.data[:, None], np.sum(g * x.data, axis=1)

    return _make(x.data * w.data[:, None], (x, w), backward, "mul_rows")


def select(x: Tensor, i: int) -> Tensor:
    """Element ``i`` of a 1-D tensor as a shape-() scalar."""
    _check(x.data.ndim == 1, "select needs a 1-D tensor")

    def backward(g):
        out = np.zeros_like(x.data)
        out[i] = g
        return (out,)

    return _make(x.data[i], (x,), backward, "select")


# --- shape ----------------------------------------------------------------


def concat(ts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last dimension."""
    _check(len(ts) > 0, "concat of nothing")
    lead = ts[0].shape[:-1]
    _check(all(t.shape[:-1] == lead for t in ts), "concat leading shapes differ")
    widths = [t.shape[-1] for t in ts]
    cuts = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _make(np.concatenate([t.data for t in ts], axis=-1), tuple(ts), backward, "concat")


def split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the last dimension into pieces of the given widths."""
    _check(sum(sizes) == x.shape[-1], f"split sizes {list(sizes)} do not sum to {x.shape[-1]}")
    out = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[..., lo:hi] = g
            return (full,)

        out.append(_make(x.data[..., lo:hi], (x,), backward, "split"))
        start = hi
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows x[idx]."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        if x.data.ndim == 1:
            return (np.bincount(idx, weights=g, minlength=n).astype(np.float64),)
        return (np.asarray(_index_matrix(idx, n) @ g),)

    return _make(x.data[idx], (x,), backward, "gather")


def scatter_add(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """out[idx[k]] += x[k] for an (m, d) tensor, giving (n, d)."""
    idx = np.asarray(idx, dtype=np.int64)
    _check(x.shape[0] == len(idx), f"scatter_add: {x.shape[0]} rows but {len(idx)} targets")
    _check(len(idx) == 0 or (idx.min() >= 0 and idx.max() < n), "scatter_add target out of range")
    out = np.asarray(_index_matrix(idx, n) @ x.data) if len(idx) else np.zeros((n,) + x.shape[1:])
    return _make(out, (x,), lambda g: (g[idx],), "scatter_add")


# --- reductions -----------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return _make(np.sum(x.data), (x,), lambda g: (np.full_like(x.data, g),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.mean(x.data), (x,), lambda g: (np.full_like(x.data, g / n),), "mean")


def row_sum(x: Tensor) -> Tensor:
    """Sum over the last dimension of an (n, d) tensor."""
    return _make(x.data.sum(axis=1), (x,), lambda g: (np.repeat(g[:, None], x.shape[1], axis=1),), "row_sum")


def row_mean(x: Tensor) -> Tensor:
    d = x.shape[1]
    return _make(x.data.mean(axis=1), (x,), lambda g: (np.repeat(g[:, None] / d, d, axis=1),), "row_mean")


def segment_sum(x: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    """Per-segment row sums: out[s] = sum of x[i] with seg[i] == s."""
    return scatter_add(x, seg, n_seg)


def segment_mean(x: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_seg).astype(np.float64)
    _check(bool(np.all(counts > 0)), "segment_mean over an empty segment")
    summed = scatter_add(x, seg, n_seg)
    return mul_rows(summed, Tensor(1.0 / counts))


def segment_max(x: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    """Per-segment, per-column maximum; the gradient goes to the first arg-max row."""
    seg = np.asarray(seg, dtype=np.int64)
    d = x.shape[1]
    out = np.empty((n_seg, d))
    arg = np.empty((n_seg, d), dtype=np.int64)
    for s in range(n_seg):
        rows = np.flatnonzero(seg == s)
        _check(len(rows) > 0, "segment_max over an empty segment")
        am = np.argmax(x.data[rows], axis=0)
        arg[s] = rows[am]
        out[s] = x.data[arg[s], np.arange(d)]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (arg.ravel(), np.tile(np.arange(d), n_seg)), g.ravel())
        return (full,)

    return _make(out, (x,), backward, "segment_max")


# --- nonlinearities -------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of an (n, d) tensor, then apply gamma * xhat + beta."""
    _check(x.data.ndim == 2, f"layer_norm needs (n, d), got {x.shape}")
    d = x.shape[1]
    _check(gamma.shape == (d,) and beta.shape == (d,), "layer_norm affine shape mismatch")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target of the same shape."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    _check(pred.shape == t.shape, f"mse shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _make(np.mean(diff * diff), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


# --- differentiation ------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

    Gradients add to whatever is already in ``.grad``; clear them with
    ``zero_grad`` between steps.  The tape is released afterwards.
    """
    if loss.data.shape != ():
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._consumed:
            raise TapeError("tape already consumed by a previous backward call")
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        node._backward = None
        node._consumed = True


def vjp(fn: Callable[[Tensor], Tensor], x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product cotangent^T J of ``fn`` at ``x``."""
    xt = parameter(x)
    out = fn(xt)
    backward(sum_all(mul(out, Tensor(cotangent))))
    return xt.grad if xt.grad is not None else np.zeros_like(x)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    n_skipped: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"{status}: max rel err {self.max_rel_error:.3e}, max abs err {self.max_abs_error:.3e}, "
            f"{self.n_checked} coords checked, {self.n_skipped} skipped"
        )


def grad_check(
    f: Callable[..., Tensor],
    x: np.ndarray | Sequence[np.ndarray],
    step: float = 1e-5,
    rtol: float = 1e-4,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``x`` is one array or a list of arrays passed to ``f`` as tensors.  The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Coordinates whose one-sided differences disagree by more than
    ``sqrt(step)`` (relative) sit within ``step`` of a kink and are skipped.
    """
    single = isinstance(x, np.ndarray)
    arrays = [np.array(a, dtype=np.float64) for a in ([x] if single else x)]

    def value(arrs) -> float:
        out = f(*[Tensor(a) for a in arrs])
        v = float(out.data)
        if not np.isfinite(v):
            raise FloatingPointError("non-finite value in grad_check")
        return v

    params = [parameter(a) for a in arrays]
    out = f(*params)
    if out.data.shape != ():
        raise TapeError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data):
        raise FloatingPointError("non-finite value in grad_check")
    backward(out)
    f0 = float(out.data)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    max_rel = max_abs = 0.0
    checked = skipped = 0
    for a_idx, arr in enumerate(arrays):
        for flat in range(arr.size):
            pos = np.unravel_index(flat, arr.shape)
            orig = arr[pos]
            arr[pos] = orig + step
            f_plus = value(arrays)
            arr[pos] = orig - step
            f_minus = value(arrays)
            arr[pos] = orig
            fwd = (f_plus - f0) / step
            bwd = (f0 - f_minus) / step
            if abs(fwd - bwd) > np.sqrt(step) * max(abs(fwd), abs(bwd), 1.0):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic[a_idx][pos])
            err = abs(a - numeric)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(a), abs(numeric), floor))
            checked += 1
    return GradCheckReport(max_rel <= rtol, max_rel, max_abs, checked, skipped)
