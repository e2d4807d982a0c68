"""Reverse-mode automatic differentiation over float64 scalars, vectors, matrices.

Define-by-run: operations on :class:`Tensor` handles execute eagerly in numpy
and append a record to the owning :class:`Tape`; the tape replays the records
in reverse to accumulate partial derivatives. Every op also accepts plain
numpy arrays (or floats), in which case it computes without recording, so the
same model code runs in inference mode by passing arrays instead of tape
inputs.

Only ranks 0..2 are supported; values are always float64. ReLU and clamp use
subgradient 0 at the kink, softmax subtracts the max before exponentiating.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numba
import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "DomainError",
    "value_and_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "outer",
    "exp",
    "log",
    "relu",
    "clamp_min",
    "softplus",
    "sigmoid",
    "softmax",
    "l1_normalize",
    "transpose",
    "total",
    "rows",
    "cols",
    "concat_rows",
    "concat_cols",
    "gather_cols",
    "pick_per_column",
    "shift_cols",
    "ssm_scan",
]


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise ShapeError(f"rank {a.ndim} > 2 not supported (shape {a.shape})")
    return a


class _Node:
    __slots__ = ("value", "parents", "vjp", "label")

    def __init__(self, value, parents, vjp, label):
        self.value = value
        self.parents = parents  # node indices of Tensor operands
        self.vjp = vjp  # grad_out -> tuple of grads aligned with parents
        self.label = label


class Tensor:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # keep numpy from consuming Tensor operands

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(node={self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Operation record for one forward pass.

    A tape is single-threaded and single-use: build the graph by calling ops
    on tensors created with :meth:`input`, then call :meth:`gradients` once
    with a scalar seed. Repeated forward passes with identical inputs produce
    bit-identical values (all ops are deterministic numpy calls).
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._inputs: dict[str, int] = {}

    def input(self, name: str, value) -> Tensor:
        """Register a named differentiable leaf."""
        if name in self._inputs:
            raise ValueError(f"duplicate input name {name!r}")
        v = _as_array(value)
        idx = self._record(v, (), None, f"input:{name}")
        self._inputs[name] = idx
        return Tensor(self, idx, v)

    def _record(self, value, parents, vjp, label) -> int:
        self._nodes.append(_Node(value, parents, vjp, label))
        return len(self._nodes) - 1

    def gradients(self, seed: Tensor) -> dict[str, np.ndarray]:
        """Partial derivatives of a scalar seed w.r.t. every named input.

        Inputs the seed does not depend on get zero gradients.
        """
        if seed.tape is not self:
            raise ValueError("seed tensor belongs to a different tape")
        if seed.value.shape != ():
            raise ShapeError(f"gradient seed must be scalar, got shape {seed.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[seed.index] = np.ones(())
        for idx in range(seed.index, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self._nodes[idx]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                # accumulation allocates fresh arrays, so aliasing the vjp
                # output (or a forward value) is safe here
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        out = {}
        for name, idx in self._inputs.items():
            g = grads[idx]
            out[name] = np.zeros_like(self._nodes[idx].value) if g is None else g
        return out

    def node_label(self, index: int) -> str:
        return self._nodes[index].label


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor], inputs: dict) -> tuple:
    """Evaluate ``fn`` on tape-bound inputs; return (scalar value, named grads)."""
    tape = Tape()
    bound = {k: tape.input(k, v) for k, v in inputs.items()}
    out = fn(bound)
    return out.value, tape.gradients(out)


# ---------------------------------------------------------------------------
# op plumbing

def _is_t(x) -> bool:
    return isinstance(x, Tensor)


def _val(x) -> np.ndarray:
    return x.value if _is_t(x) else _as_array(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if _is_t(x):
            return x.tape
    raise TypeError("no Tensor operand")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _emit(tape, value, srcs, vjps, label) -> Tensor:
    """Record a node; `srcs`/`vjps` aligned, non-Tensor sources dropped."""
    parents = []
    keep = []
    for s, f in zip(srcs, vjps):
        if _is_t(s):
            parents.append(s.index)
            keep.append(f)

    def vjp(g):
        return tuple(f(g) for f in keep)

    idx = tape._record(value, tuple(parents), vjp, label)
    return Tensor(tape, idx, value)


def _unary(x, fwd, make_vjp, label):
    xv = _val(x)
    out = fwd(xv)
    if not _is_t(x):
        return out
    return _emit(x.tape, out, (x,), (make_vjp(xv, out),), label)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    if not (_is_t(a) or _is_t(b)):
        return out
    return _emit(
        _tape_of(a, b), out, (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)),
        "add",
    )


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    if not (_is_t(a) or _is_t(b)):
        return out
    return _emit(
        _tape_of(a, b), out, (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(-g, bv.shape)),
        "sub",
    )


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    if not (_is_t(a) or _is_t(b)):
        return out
    return _emit(
        _tape_of(a, b), out, (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def neg(x):
    return _unary(x, np.negative, lambda xv, out: lambda g: -g, "neg")


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = av @ bv
        if not (_is_t(a) or _is_t(b)):
            return out
        return _emit(
            _tape_of(a, b), out, (a, b),
            (lambda g: g @ bv.T, lambda g: av.T @ g),
            "matmul",
        )
    if av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matvec: {av.shape} @ {bv.shape}")
        out = av @ bv
        if not (_is_t(a) or _is_t(b)):
            return out
        return _emit(
            _tape_of(a, b), out, (a, b),
            (lambda g: np.outer(g, bv), lambda g: av.T @ g),
            "matvec",
        )
    raise ShapeError(f"matmul supports (2d,2d) and (2d,1d); got {av.shape} @ {bv.shape}")


def outer(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 1 or bv.ndim != 1:
        raise ShapeError(f"outer needs two vectors; got {av.shape}, {bv.shape}")
    out = np.outer(av, bv)
    if not (_is_t(a) or _is_t(b)):
        return out
    return _emit(
        _tape_of(a, b), out, (a, b),
        (lambda g: g @ bv, lambda g: g.T @ av),
        "outer",
    )


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(x):
    return _unary(x, np.exp, lambda xv, out: lambda g: g * out, "exp")


def log(x):
    xv = _val(x)
    if np.any(xv <= 0.0):
        where = f" at tape node {x.index}" if _is_t(x) else ""
        raise DomainError(f"log: non-positive argument{where}")
    return _unary(x, np.log, lambda v, out: lambda g: g / v, "log")


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0),
                  lambda v, out: lambda g: g * (v > 0.0), "relu")


def clamp_min(x, floor: float):
    """Elementwise max(x, floor); subgradient 0 where x <= floor."""
    return _unary(x, lambda v: np.maximum(v, floor),
                  lambda v, out: lambda g: g * (v > floor), "clamp_min")


def softplus(x):
    return _unary(x, lambda v: np.logaddexp(0.0, v),
                  lambda v, out: lambda g: g * _sigmoid_raw(v), "softplus")


def _sigmoid_raw(v: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(v))
    return np.where(v >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x):
    return _unary(x, _sigmoid_raw,
                  lambda v, out: lambda g: g * out * (1.0 - out), "sigmoid")


def softmax(x):
    """Softmax over a vector, or independently over each column of a matrix."""
    def fwd(v):
        ax = 0
        z = v - v.max(axis=ax, keepdims=v.ndim > 1)
        e = np.exp(z)
        return e / e.sum(axis=ax, keepdims=v.ndim > 1)

    def make_vjp(v, out):
        def vjp(g):
            keep = v.ndim > 1
            inner = (g * out).sum(axis=0, keepdims=keep)
            return out * (g - inner)
        return vjp

    xv = _val(x)
    if xv.ndim not in (1, 2):
        raise ShapeError(f"softmax needs a vector or matrix, got shape {xv.shape}")
    return _unary(x, fwd, make_vjp, "softmax")


def l1_normalize(x):
    """Normalize nonnegative entries to sum 1 (per column for matrices)."""
    xv = _val(x)
    if xv.ndim not in (1, 2):
        raise ShapeError(f"l1_normalize needs a vector or matrix, got shape {xv.shape}")
    if np.any(xv < 0.0):
        where = f" at tape node {x.index}" if _is_t(x) else ""
        raise DomainError(f"l1_normalize: negative entry{where}")
    keep = xv.ndim > 1
    s = xv.sum(axis=0, keepdims=keep)
    if np.any(s <= 0.0):
        where = f" at tape node {x.index}" if _is_t(x) else ""
        raise DomainError(f"l1_normalize: zero column sum{where}")
    out = xv / s

    if not _is_t(x):
        return out

    def vjp(g):
        inner = (g * out).sum(axis=0, keepdims=keep)
        return (g - inner) / s

    return _emit(x.tape, out, (x,), (vjp,), "l1_normalize")


# ---------------------------------------------------------------------------
# structure

def transpose(x):
    return _unary(x, lambda v: v.T.copy(), lambda v, out: lambda g: g.T, "transpose")


def total(x):
    """Sum of all entries; returns a scalar."""
    def make_vjp(v, out):
        return lambda g: np.broadcast_to(g, v.shape).astype(np.float64)
    return _unary(x, lambda v: np.asarray(v.sum()), make_vjp, "total")


def rows(x, start: int, stop: int):
    def make_vjp(v, out):
        def vjp(g):
            z = np.zeros_like(v)
            z[start:stop] = g
            return z
        return vjp
    return _unary(x, lambda v: v[start:stop].copy(), make_vjp, "rows")


def cols(x, start: int, stop: int):
    def make_vjp(v, out):
        def vjp(g):
            z = np.zeros_like(v)
            z[:, start:stop] = g
            return z
        return vjp
    return _unary(x, lambda v: v[:, start:stop].copy(), make_vjp, "cols")


def _concat(parts, axis, label):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(_is_t(p) for p in parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp_for(i):
        lo, hi = offsets[i], offsets[i + 1]
        if axis == 0:
            return lambda g: g[lo:hi]
        return lambda g: g[:, lo:hi]

    return _emit(_tape_of(*parts), out, tuple(parts),
                 tuple(vjp_for(i) for i in range(len(parts))), label)


def concat_rows(parts: Sequence):
    return _concat(parts, 0, "concat_rows")


def concat_cols(parts: Sequence):
    return _concat(parts, 1, "concat_cols")


def gather_cols(x, idx):
    """Select columns by integer index (with repetition); x is (m, K)."""
    idx = np.asarray(idx)
    xv = _val(x)
    if xv.ndim != 2:
        raise ShapeError(f"gather_cols needs a matrix, got shape {xv.shape}")
    out = xv[:, idx]

    if not _is_t(x):
        return out

    def vjp(g):
        z = np.empty_like(xv)
        for r in range(xv.shape[0]):
            z[r] = np.bincount(idx, weights=g[r], minlength=xv.shape[1])
        return z

    return _emit(x.tape, out, (x,), (vjp,), "gather_cols")


def pick_per_column(x, idx):
    """Pick one row entry per column: out[0, j] = x[idx[j], j]."""
    idx = np.asarray(idx)
    xv = _val(x)
    if xv.ndim != 2 or idx.shape != (xv.shape[1],):
        raise ShapeError(f"pick_per_column: x {xv.shape}, idx {idx.shape}")
    ar = np.arange(xv.shape[1])
    out = xv[idx, ar][None, :]

    if not _is_t(x):
        return out

    def vjp(g):
        z = np.zeros_like(xv)
        z[idx, ar] = g[0]
        return z

    return _emit(x.tape, out, (x,), (vjp,), "pick_per_column")


def shift_cols(x, k: int):
    """Shift columns right by k, filling with zeros on the left."""
    if k < 0:
        raise ShapeError("shift_cols: k must be >= 0")
    if k == 0:
        return x
    xv = _val(x)
    n = xv.shape[1]
    out = np.zeros_like(xv)
    if k < n:
        out[:, k:] = xv[:, : n - k]

    if not _is_t(x):
        return out

    def vjp(g):
        z = np.zeros_like(xv)
        if k < n:
            z[:, : n - k] = g[:, k:]
        return z

    return _emit(x.tape, out, (x,), (vjp,), "shift_cols")


# ---------------------------------------------------------------------------
# fused selective-SSM recurrence

@numba.njit(cache=True)
def _scan_forward(a, x, b, c):
    # a: (T, B); x: (ed, T, B); b, c: (N, T, B)
    T, B = a.shape
    ed, N = x.shape[0], b.shape[0]
    H = np.zeros((ed, N, B))
    states = np.empty((T, ed, N, B))
    y = np.empty((ed, T, B))
    for t in range(T):
        for i in range(ed):
            for n in range(N):
                for s in range(B):
                    h = a[t, s] * H[i, n, s] + x[i, t, s] * b[n, t, s]
                    H[i, n, s] = h
                    states[t, i, n, s] = h
        for i in range(ed):
            for s in range(B):
                acc = 0.0
                for n in range(N):
                    acc += H[i, n, s] * c[n, t, s]
                y[i, t, s] = acc
    return states, y


@numba.njit(cache=True)
def _scan_backward(a, x, b, c, states, g):
    T, B = a.shape
    ed, N = x.shape[0], b.shape[0]
    dH = np.zeros((ed, N, B))
    da = np.zeros((T, B))
    dx = np.empty((ed, T, B))
    db = np.empty((N, T, B))
    dc = np.empty((N, T, B))
    for t in range(T - 1, -1, -1):
        for n in range(N):
            for s in range(B):
                acc = 0.0
                for i in range(ed):
                    acc += states[t, i, n, s] * g[i, t, s]
                dc[n, t, s] = acc
        for i in range(ed):
            for n in range(N):
                for s in range(B):
                    dH[i, n, s] += g[i, t, s] * c[n, t, s]
        if t > 0:
            for s in range(B):
                acc = 0.0
                for i in range(ed):
                    for n in range(N):
                        acc += dH[i, n, s] * states[t - 1, i, n, s]
                da[t, s] = acc
        for i in range(ed):
            for s in range(B):
                acc = 0.0
                for n in range(N):
                    acc += dH[i, n, s] * b[n, t, s]
                dx[i, t, s] = acc
        for n in range(N):
            for s in range(B):
                acc = 0.0
                for i in range(ed):
                    acc += dH[i, n, s] * x[i, t, s]
                db[n, t, s] = acc
        for i in range(ed):
            for n in range(N):
                for s in range(B):
                    dH[i, n, s] *= a[t, s]
    return da, dx, db, dc


def ssm_scan(a, x, b, c, n_steps: int):
    """Run H_t = a_t * H_{t-1} + x_t b_t^T, y_t = H_t c_t over blocked columns.

    All arguments use a time-major blocked column layout: column t*B + s holds
    step t of batch element s, where B = n_cols / n_steps. Shapes: a is
    (1, n_cols), x is (ed, n_cols), b and c are (N, n_cols); the result y is
    (ed, n_cols) with the same layout. H_0 = 0. The whole recurrence is one
    tape node; the backward pass replays it in reverse (BPTT) and keeps every
    intermediate state in memory, costing n_steps * ed * N * B floats.
    """
    av, xv, bv, cv = _val(a), _val(x), _val(b), _val(c)
    ncols = xv.shape[1]
    if n_steps < 1 or ncols % n_steps != 0:
        raise ShapeError(f"ssm_scan: {ncols} columns not divisible into {n_steps} steps")
    B = ncols // n_steps
    ed, N = xv.shape[0], bv.shape[0]
    if av.shape != (1, ncols) or bv.shape != (N, ncols) or cv.shape != (N, ncols):
        raise ShapeError("ssm_scan: operand shapes disagree")

    a3 = np.ascontiguousarray(av.reshape(n_steps, B))
    x3 = np.ascontiguousarray(xv.reshape(ed, n_steps, B))
    b3 = np.ascontiguousarray(bv.reshape(N, n_steps, B))
    c3 = np.ascontiguousarray(cv.reshape(N, n_steps, B))

    states, y3 = _scan_forward(a3, x3, b3, c3)
    y = y3.reshape(ed, ncols)

    if not any(_is_t(v) for v in (a, x, b, c)):
        return y

    def vjp(g):
        g3 = np.ascontiguousarray(g.reshape(ed, n_steps, B))
        da, dx, db, dc = _scan_backward(a3, x3, b3, c3, states, g3)
        return (da.reshape(1, ncols), dx.reshape(ed, ncols),
                db.reshape(N, ncols), dc.reshape(N, ncols))

    srcs = (a, x, b, c)
    tape = _tape_of(*srcs)
    parents = []
    slots = []
    for i, s in enumerate(srcs):
        if _is_t(s):
            parents.append(s.index)
            slots.append(i)

    def node_vjp(g):
        full = vjp(g)
        return tuple(full[i] for i in slots)

    idx = tape._record(y, tuple(parents), node_vjp, "ssm_scan")
    return Tensor(tape, idx, y)
