"""Tape-based reverse-mode differentiation over numpy arrays.

Only the handful of operations the SupMAE model needs are implemented, each
with a hand-written vector-Jacobian product. Every rule is checkable against
central finite differences with :func:`grad_check`.

GELU uses the tanh approximation. Reductions rely on numpy's fixed
(pairwise, shape-determined) summation order, so a given build produces
bitwise-identical forward and backward results for identical inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-6
BN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    """An immutable array, optionally attached to a :class:`Graph` node."""

    __slots__ = ("data", "graph", "node", "name")

    def __init__(self, data, graph: "Graph | None" = None, node: int | None = None, name: str | None = None):
        self.data = data
        self.graph = graph
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.graph is not None and self.graph.nodes[self.node].op == "leaf"

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar kept to what the model uses
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    vjp: Callable | None
    name: str | None = None
    requires_grad: bool = True


@dataclass
class Graph:
    """Append-only op record. Node ids are topologically ordered by construction."""

    nodes: list[Node] = field(default_factory=list)
    check_finite: bool = True
    leaf_data: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def leaf(self, name: str, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        data = np.asarray(data)
        self.nodes.append(Node("leaf", (), None, name, requires_grad))
        self.leaf_data[len(self.nodes) - 1] = data
        return Tensor(data, self, len(self.nodes) - 1, name)

    def bind(self, arrays: dict[str, np.ndarray], frozen: Sequence[str] = ()) -> dict[str, Tensor]:
        return {k: self.leaf(k, v, requires_grad=k not in frozen) for k, v in arrays.items()}

    def _push(self, op: str, out: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
        # a sum is non-finite iff some element is (or the total overflows)
        if self.check_finite and not np.isfinite(out.sum()):
            raise NumericError(f"non-finite output from {op}")
        ids = tuple(t.node if isinstance(t, Tensor) and t.graph is self else -1 for t in inputs)
        # nothing trainable upstream: drop the closure so its saved arrays are freed
        live = any(i >= 0 and self.nodes[i].requires_grad for i in ids)
        self.nodes.append(Node(op, ids, vjp if live else None, requires_grad=live))
        return Tensor(out, self, len(self.nodes) - 1)


def _graph_of(*xs) -> Graph:
    g = None
    for x in xs:
        if isinstance(x, Tensor) and x.graph is not None:
            if g is not None and x.graph is not g:
                raise UsageError("tensors from different graphs")
            g = x.graph
    return _CONSTANT if g is None else g


class _ConstantFold:
    """Stand-in graph for ops whose inputs are all constants: nothing is recorded."""

    check_finite = True

    def _push(self, op: str, out: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
        if not np.isfinite(out.sum()):
            raise NumericError(f"non-finite output from {op}")
        return Tensor(out)


_CONSTANT = _ConstantFold()


def _arr(x, like: np.ndarray | None = None) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if like is not None and a.dtype != like.dtype:
        a = a.astype(like.dtype)
    return a


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo leading-dim broadcasting
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    return g


def _check_trailing(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape[a.ndim - b.ndim:] != b.shape or b.ndim > a.ndim:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    """a + b, where b may broadcast over a's leading dimensions."""
    ad = _arr(a)
    bd = _arr(b, ad)
    _check_trailing(ad, bd, "add")
    bshape = bd.shape
    return _graph_of(a, b)._push("add", ad + bd, (a, b), lambda g: (g, _sum_to(g, bshape)))


def sub(a, b) -> Tensor:
    ad = _arr(a)
    bd = _arr(b, ad)
    _check_trailing(ad, bd, "sub")
    bshape = bd.shape
    return _graph_of(a, b)._push("sub", ad - bd, (a, b), lambda g: (g, -_sum_to(g, bshape)))


def mul(a, b) -> Tensor:
    ad = _arr(a)
    bd = _arr(b, ad)
    _check_trailing(ad, bd, "mul")
    bshape = bd.shape
    return _graph_of(a, b)._push("mul", ad * bd, (a, b), lambda g: (g * bd, _sum_to(g * ad, bshape)))


def scale(a: Tensor, c: float) -> Tensor:
    ad = _arr(a)
    c = ad.dtype.type(c)
    return _graph_of(a)._push("scale", ad * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = _arr(a)
    two = ad.dtype.type(2)
    return _graph_of(a)._push("square", ad * ad, (a,), lambda g: (two * ad * g,))


def relu(a: Tensor) -> Tensor:
    ad = _arr(a)
    pos = ad > 0
    return _graph_of(a)._push("relu", np.where(pos, ad, 0).astype(ad.dtype), (a,), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = _arr(a)
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    x2 = x * x
    t = x2 * x
    t *= k
    t += x
    t *= c
    np.tanh(t, out=t)
    out = t + 1
    out *= x
    out *= half

    def vjp(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        inner = x2 * (3 * k)
        inner += 1
        inner *= c
        sech = t * t
        np.subtract(1, sech, out=sech)
        sech *= inner
        sech *= x
        sech += t
        sech += 1
        sech *= half
        sech *= g
        return (sech,)

    return _graph_of(a)._push("gelu", out, (a,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """a[..., m, k] @ b[k, n] or batched b[..., k, n] with identical batch dims."""
    ad = _arr(a)
    bd = _arr(b, ad)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or (
        bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]
    ):
        raise DimensionError(f"matmul: shapes {ad.shape} and {bd.shape} are incompatible")
    if bd.ndim == 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd

    def vjp(g):
        if bd.ndim == 2:
            da = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
        else:
            da = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, n = bd.shape
            db = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = np.swapaxes(ad, -1, -2) @ g
        return da, db

    return _graph_of(a, b)._push("matmul", out, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """x[..., k] @ w[k, n] (+ b[n])."""
    xd = _arr(x)
    wd = _arr(w, xd)
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear: shapes {xd.shape} and {wd.shape} are incompatible")
    k, n = wd.shape
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    if b is not None:
        bd = _arr(b, xd)
        if bd.shape != (n,):
            raise DimensionError(f"linear: bias shape {bd.shape} does not match {n}")
        out += bd
    out = out.reshape(lead + (n,))

    def vjp(g):
        g2 = g.reshape(-1, n)
        dx = (g2 @ wd.T).reshape(lead + (k,))
        dw = x2.T @ g2
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _graph_of(*inputs)._push("linear", out, inputs, vjp)


# ---------------------------------------------------------------- normalization

def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    xd = _arr(x)
    gd = _arr(gamma, xd)
    bd = _arr(beta, xd)
    d = xd.shape[-1]
    if gd.shape != (d,) or bd.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gamma {gd.shape}, beta {bd.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xhat = xd - mu
    var = np.square(xhat).mean(axis=-1, keepdims=True)
    var += xd.dtype.type(eps)
    rstd = np.sqrt(var)
    np.reciprocal(rstd, out=rstd)
    xhat *= rstd
    out = xhat * gd
    out += bd

    def vjp(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dxhat -= m1
        dxhat -= xhat * m2
        dxhat *= rstd
        g2 = g.reshape(-1, d)
        return dxhat, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _graph_of(x, gamma, beta)._push("layer_norm", out, (x, gamma, beta), vjp)


def batch_norm(
    x,
    gamma=None,
    beta=None,
    running: dict | None = None,
    train: bool = True,
    momentum: float = 0.1,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-feature batch statistics over axis 0 of x[B, D].

    In train mode ``running`` (dict with "mean" and "var") is updated in place
    with the unbiased batch variance; in eval mode it supplies the statistics.
    """
    xd = _arr(x)
    if xd.ndim != 2:
        raise DimensionError(f"batch_norm expects [B, D], got {xd.shape}")
    bsz, d = xd.shape
    dt = xd.dtype.type
    affine = gamma is not None
    gd = _arr(gamma, xd) if affine else None
    bd = _arr(beta, xd) if affine else None
    if train:
        if bsz < 2:
            raise UsageError("batch_norm in train mode needs batch size >= 2")
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = (xc * xc).mean(axis=0)
        if running is not None:
            m = running["mean"].dtype.type(momentum)
            running["mean"] = (1 - m) * running["mean"] + m * mu.astype(running["mean"].dtype)
            unbiased = (var * dt(bsz / (bsz - 1))).astype(running["var"].dtype)
            running["var"] = (1 - m) * running["var"] + m * unbiased
    else:
        mu = running["mean"].astype(xd.dtype)
        var = running["var"].astype(xd.dtype)
        xc = xd - mu
    rstd = 1 / np.sqrt(var + dt(eps))
    xhat = xc * rstd
    out = xhat * gd + bd if affine else xhat

    def vjp(g):
        dxhat = g * gd if affine else g
        if train:
            dx = rstd * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        else:
            dx = dxhat * rstd
        if affine:
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
        return (dx,)

    inputs = (x, gamma, beta) if affine else (x,)
    return _graph_of(*inputs)._push("batch_norm", out, inputs, vjp)


def softmax(x) -> Tensor:
    xd = _arr(x)
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _graph_of(x)._push("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x) -> Tensor:
    xd = _arr(x)
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _graph_of(x)._push("log_softmax", out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d_h)) v over inputs shaped [..., h, L, d_h]."""
    qd, kd, vd = _arr(q), _arr(k), _arr(v)
    if not (qd.shape == kd.shape == vd.shape) or qd.ndim < 3:
        raise DimensionError(f"attention: q {qd.shape}, k {kd.shape}, v {vd.shape}")
    sc = qd.dtype.type(1.0 / np.sqrt(qd.shape[-1]))
    p = qd @ np.swapaxes(kd, -1, -2)
    p *= sc
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def vjp(g):
        dv = np.swapaxes(p, -1, -2) @ g
        ds = g @ np.swapaxes(vd, -1, -2)
        ds -= (ds * p).sum(axis=-1, keepdims=True)
        ds *= p
        ds *= sc
        return ds @ kd, np.swapaxes(ds, -1, -2) @ qd, dv

    return _graph_of(q, k, v)._push("attention", out, (q, k, v), vjp)


# ---------------------------------------------------------------- shape plumbing

def reshape(x, shape: Sequence[int]) -> Tensor:
    xd = _arr(x)
    old = xd.shape
    return _graph_of(x)._push("reshape", xd.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    xd = _arr(x)
    inv = np.argsort(axes)
    return _graph_of(x)._push("transpose", np.transpose(xd, axes), (x,), lambda g: (np.transpose(g, inv),))


def mean(x, axis: int) -> Tensor:
    xd = _arr(x)
    n = xd.shape[axis]
    shape = xd.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / xd.dtype.type(n), shape).copy(),)

    return _graph_of(x)._push("mean", xd.mean(axis=axis), (x,), vjp)


def total(x) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    xd = _arr(x)
    shape = xd.shape
    return _graph_of(x)._push("sum", np.asarray(xd.sum()), (x,), lambda g: (np.full(shape, g, dtype=xd.dtype),))


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """out[b, j] = x[b, idx[b, j]] for x[B, N, D] and integer idx[B, K]."""
    xd = _arr(x)
    idx = np.asarray(idx)
    if xd.ndim != 3 or idx.ndim != 2 or idx.shape[0] != xd.shape[0]:
        raise DimensionError(f"gather_rows: x {xd.shape}, idx {idx.shape}")
    bidx = np.arange(xd.shape[0])[:, None]
    out = xd[bidx, idx]

    def vjp(g):
        dx = np.zeros_like(xd)
        np.add.at(dx, (bidx, idx), g)
        return (dx,)

    return _graph_of(x)._push("gather_rows", out, (x,), vjp)


def take(x, indices, axis: int) -> Tensor:
    """np.take along one axis; an int index drops the axis."""
    xd = _arr(x)
    indices = np.asarray(indices)
    out = np.take(xd, indices, axis=axis)

    def vjp(g):
        dx = np.zeros_like(xd)
        sl = [slice(None)] * xd.ndim
        sl[axis] = indices
        if indices.ndim == 0:
            dx[tuple(sl)] += g
        else:
            np.add.at(dx, tuple(sl), g)
        return (dx,)

    return _graph_of(x)._push("take", out, (x,), vjp)


def concat(xs: Sequence, axis: int) -> Tensor:
    ds = [_arr(t) for t in xs]
    ds = [d.astype(ds[0].dtype) for d in ds]
    splits = np.cumsum([d.shape[axis] for d in ds])[:-1]
    out = np.concatenate(ds, axis=axis)
    return _graph_of(*xs)._push("concat", out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def tile_rows(token, batch: int, count: int) -> Tensor:
    """Repeat a [D] vector into [batch, count, D]."""
    td = _arr(token)
    out = np.broadcast_to(td, (batch, count) + td.shape).copy()
    return _graph_of(token)._push("tile_rows", out, (token,), lambda g: (g.sum(axis=(0, 1)),))


# ---------------------------------------------------------------- differentiation

def backward(
    out: Tensor,
    seed: np.ndarray | None = None,
    wrt: Sequence[Tensor] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse sweep from ``out``; returns gradients keyed by leaf name.

    Every trainable leaf of the graph gets an entry; leaves the output does
    not depend on get exact zeros.
    """
    graph = out.graph
    if graph is None:
        raise UsageError("output is not attached to a graph")
    if wrt is not None:
        for t in wrt:
            if not isinstance(t, Tensor) or t.graph is not graph or not t.is_leaf:
                raise UsageError(f"gradient requested for non-leaf {t!r}")
    if seed is None:
        if out.data.size != 1:
            raise UsageError("seed gradient required for non-scalar output")
        seed = np.ones_like(out.data)
    grads: list = [None] * len(graph.nodes)
    grads[out.node] = np.asarray(seed, dtype=out.dtype).reshape(out.shape)
    for i in range(out.node, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.vjp is None:
            continue
        for j, gi in zip(node.inputs, node.vjp(g)):
            if j < 0 or gi is None:
                continue
            grads[j] = gi if grads[j] is None else grads[j] + gi
        if node.op != "leaf":
            grads[i] = None
    result = {}
    names = None if wrt is None else {t.name for t in wrt}
    for i, node in enumerate(graph.nodes):
        if node.op != "leaf" or not node.requires_grad:
            continue
        if names is not None and node.name not in names:
            continue
        g = grads[i]
        result[node.name] = g if g is not None else np.zeros_like(graph.leaf_data[i])
    return result




@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def table(self) -> str:
        lines = [f"{'parameter':40s} {'max rel err':>12s}  status"]
        for k, e in self.errors.items():
            lines.append(f"{k:40s} {e:12.3e}  {'ok' if e <= self.tol else 'FAIL'}")
        return "\n".join(lines)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(
    f: Callable[[Graph, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    oracle_dtype=np.float64,
) -> GradCheckReport:
    """Compare backward() against central differences for every parameter.

    ``f`` builds a scalar loss on the graph it is handed. With ``max_entries``
    set, at most that many coordinates per tensor are probed (chosen by a
    seeded permutation, always including the largest-gradient entry).

    The analytic side always runs at float64. ``oracle_dtype=np.longdouble``
    evaluates the finite differences in extended precision, which removes
    their roundoff floor (about eps * |f| / h) so that coordinates with very
    small gradients are still resolved.
    """
    for k, v in params.items():
        if v.dtype != np.float64:
            raise UsageError(f"grad_check needs float64 parameters; {k} is {v.dtype}")
    work = {k: v.astype(oracle_dtype) for k, v in params.items()}
    step = np.dtype(oracle_dtype).type(h)

    def evaluate() -> float:
        g = Graph()
        val = f(g, g.bind(work))
        return val.data

    g = Graph()
    loss = f(g, g.bind({k: v.copy() for k, v in params.items()}))
    if not np.isfinite(loss.data).all():
        raise NumericError(f"grad_check: loss is not finite ({loss.data})")
    analytic = backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in work.items():
        a = analytic[name].ravel()
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            pick = rng.permutation(flat.size)[: max_entries - 1]
            coords = np.unique(np.append(pick, np.argmax(np.abs(a))))
        numeric = np.empty(len(coords))
        for n, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            fp = evaluate()
            flat[c] = orig - step
            fm = evaluate()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite loss probing {name}[{c}]")
            numeric[n] = float((fp - fm) / (2 * step))
        errors[name] = float(rel_error(a[coords], numeric).max()) if len(coords) else 0.0
    return GradCheckReport(errors, tol)
