"""Dense float64 tensors with a reverse-mode gradient tape.

Every op returns a new :class:`Tensor`; nothing that has been recorded is
mutated in place.  Feature maps use the layout ``[C, T, H, W]`` or the batched
``[N, C, T, H, W]``; ops that care about layout address axes from the end
(channel ``-4``, time ``-3``), so both forms work.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_scope: contextvars.ContextVar[str] = contextvars.ContextVar("cfn_scope", default="")
_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("cfn_tape", default=None)
_DEBUG = os.environ.get("CFN_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense array that may take part in a gradient tape."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_seq", "op", "_done", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        if dtype is None:
            keep32 = isinstance(values, np.ndarray) and values.dtype == np.float32
            dtype = np.float32 if keep32 else DEFAULT_DTYPE
        self.values = np.asarray(values, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq)
        self.op = "leaf"
        self._done = False

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return reduce(self, axis, "sum", keepdims)
    def mean(self, axis=None, keepdims=False): return reduce(self, axis, "mean", keepdims)
    def max(self, axis=None, keepdims=False): return reduce(self, axis, "max", keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable dotted name."""

    __slots__ = ("name",)

    def __init__(self, name: str, values):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Construction-ordered record of ops, for structural inspection of a graph."""

    def __init__(self):
        self.entries: list[tuple[str, str]] = []

    def ops(self, scope_prefix: str = "") -> list[int]:
        return [i for i, (_, sc) in enumerate(self.entries) if sc.startswith(scope_prefix)]


@contextlib.contextmanager
def record():
    tape = Tape()
    token = _tape.set(tape)
    try:
        yield tape
    finally:
        _tape.reset(token)


@contextlib.contextmanager
def scope(name: str):
    outer = _scope.get()
    token = _scope.set(f"{outer}.{name}" if outer else name)
    try:
        yield
    finally:
        _scope.reset(token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(values)) and all(np.all(np.isfinite(p.values)) for p in parents):
        raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(values)
    out.op = op
    tape = _tape.get()
    if tape is not None:
        tape.entries.append((op, _scope.get()))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten.  The graph is released afterwards, so a second call on the
    same loss raises :class:`TapeError`.
    """
    if loss.values.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise TapeError("backward already ran on this graph; rebuild it with a fresh forward pass")
    if not loss.requires_grad or loss._backward is None:
        raise TapeError("loss is not attached to a tape (no input requires grad)")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if id(n) in nodes:
            continue
        if n._done:
            raise TapeError(f"graph through {n.op!r} was already consumed by an earlier backward")
        nodes[id(n)] = n
        stack.extend(p for p in n._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._done = True


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.values, b.shape) if b.requires_grad else None), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.values / b.values

    def bw(g):
        ga = _unbroadcast(g / b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.values, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.values * a.values, (a,), lambda g: (2.0 * g * a.values,), "square")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.values, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def clamp_min(a, lo: float) -> Tensor:
    """``max(a, lo)`` with zero gradient wherever the clamp is active."""
    a = as_tensor(a)
    mask = a.values > lo
    return _make(np.where(mask, a.values, lo), (a,), lambda g: (g * mask,), "clamp_min")


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on ``sigmoid(logits)``; targets are constants."""
    z = as_tensor(logits)
    y = np.asarray(targets.values if isinstance(targets, Tensor) else targets, dtype=z.values.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    v = z.values
    out = np.maximum(v, 0.0) - v * y + np.log1p(np.exp(-np.abs(v)))
    return _make(out, (z,), lambda g: (g * (_sigmoid(v) - y),), "bce_with_logits")


_UNARY = {"neg": neg, "exp": exp, "log": log, "sigmoid": sigmoid, "relu": relu, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``mul``, ``sigmoid``, ...)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis``; max routes the gradient to the first maximal element."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"empty reduction over axes {axes} of shape {x.shape}")
    kshape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    oshape = kshape if keepdims else tuple(n for i, n in enumerate(x.shape) if i not in axes)

    if kind == "sum":
        out = x.values.sum(axis=axes).reshape(oshape)
        return _make(out, (x,), lambda g: (np.broadcast_to(g.reshape(kshape), x.shape).copy(),), "sum")
    if kind == "mean":
        out = x.values.mean(axis=axes).reshape(oshape)
        return _make(out, (x,), lambda g: (np.broadcast_to(g.reshape(kshape) / count, x.shape).copy(),), "mean")
    if kind == "max":
        keep = [i for i in range(x.ndim) if i not in axes]
        perm = keep + list(axes)
        moved = np.transpose(x.values, perm)
        flat = moved.reshape(moved.shape[:len(keep)] + (count,))
        arg = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].reshape(oshape)

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
            return (np.transpose(gflat.reshape(moved.shape), np.argsort(perm)),)
        return _make(out, (x,), bw, "max")
    raise ValueError(f"unknown reduction {kind!r}")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.values.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.values[idx]

    def bw(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)
    return _make(np.array(out), (x,), bw, "getitem")


def take(x, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with integer indices (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    out = np.take(x.values, idx, axis=ax)

    def bw(g):
        gx = np.zeros_like(x.values)
        np.add.at(np.moveaxis(gx, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (gx,)
    return _make(out, (x,), bw, "take")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ax = axis % xs[0].ndim
    out = np.concatenate([t.values for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def bw(g):
        sl = [slice(None)] * g.ndim
        res = []
        for i in range(len(xs)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return tuple(res)
    return _make(out, xs, bw, "concat")


def cumsum(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = axis % x.ndim
    out = np.cumsum(x.values, axis=ax)
    return _make(out, (x,), lambda g: (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),), "cumsum")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    out = a.values @ b.values

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# feature-map ops ([C,T,H,W] or [N,C,T,H,W])
# ---------------------------------------------------------------------------

def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.values[None], True
    if x.ndim == 5:
        return x.values, False
    raise ShapeError(f"expected a [C,T,H,W] or [N,C,T,H,W] feature map, got shape {x.shape}")


def _wgrad(gf: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``sum_n gf[n] @ cols[n].T`` via batched BLAS."""
    return np.matmul(gf, np.swapaxes(cols, 1, 2)).sum(axis=0)


def conv_pointwise(x, w, bias=None) -> Tensor:
    """1x1x1 convolution: a per-position linear map over channels."""
    x, w = as_tensor(x), as_tensor(w)
    xv, single = _batched(x)
    n, c, t, h, wd = xv.shape
    if w.ndim != 2 or w.shape[1] != c:
        raise ShapeError(f"conv_pointwise: weight {w.shape} does not match {c} input channels")
    co = w.shape[0]
    xf = xv.reshape(n, c, t * h * wd)
    out = np.matmul(w.values, xf)
    b = None
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (co,):
            raise ShapeError(f"conv_pointwise: bias {b.shape} does not match {co} output channels")
        out += b.values[None, :, None]
    out = out.reshape(n, co, t, h, wd)
    if single:
        out = out[0]

    def bw(g):
        gf = g.reshape(n, co, t * h * wd)
        gx = np.matmul(w.values.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = _wgrad(gf, xf) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))
    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv_pointwise")


def conv_temporal(x, w, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Cross-correlation along time, shared over spatial positions (zero padding)."""
    x, w = as_tensor(x), as_tensor(w)
    xv, single = _batched(x)
    n, c, t, h, wd = xv.shape
    if w.ndim != 3 or w.shape[1] != c:
        raise ShapeError(f"conv_temporal: weight {w.shape} does not match {c} input channels")
    co, _, k = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv_temporal: kernel size must be odd, got {k}")
    if stride < 1:
        raise ValueError("conv_temporal: stride must be >= 1")
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv_temporal: input too short (T={t}, k={k}, padding={padding})")
    hw = h * wd
    xp = np.zeros((n, c, t + 2 * padding, hw), dtype=xv.dtype)
    xp[:, :, padding:padding + t] = xv.reshape(n, c, t, hw)
    span = stride * (t_out - 1) + 1
    # im2col: rows ordered (tap, channel)
    cols = np.empty((n, k, c, t_out, hw), dtype=xv.dtype)
    for j in range(k):
        cols[:, j] = xp[:, :, j:j + span:stride]
    cols = cols.reshape(n, k * c, t_out * hw)
    w2 = np.ascontiguousarray(np.transpose(w.values, (0, 2, 1))).reshape(co, k * c)
    out = np.matmul(w2, cols)
    b = None
    if bias is not None:
        b = as_tensor(bias)
        out += b.values[None, :, None]
    out = out.reshape(n, co, t_out, h, wd)
    if single:
        out = out[0]

    def bw(g):
        gf = g.reshape(n, co, t_out * hw)
        gx = gw = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, gf).reshape(n, k, c, t_out, hw)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gcols[:, j]
            gx = gxp[:, :, padding:padding + t].reshape(x.shape)
        if w.requires_grad:
            gw = np.transpose(_wgrad(gf, cols).reshape(co, k, c), (0, 2, 1))
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))
    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv_temporal")


def temporal_linear(x, weights) -> Tensor:
    """Mix time steps with a matrix: ``out[..., c, j, h, w] = sum_t W[j, t] x[..., c, t, h, w]``.

    ``weights`` is ``[J, T]`` or per-clip ``[N, J, T]``.
    """
    x, wt = as_tensor(x), as_tensor(weights)
    xv, single = _batched(x)
    n, c, t, h, wd = xv.shape
    wv = wt.values if wt.ndim == 3 else wt.values[None]
    if wv.shape[-1] != t or wv.shape[0] not in (1, n):
        raise ShapeError(f"temporal_linear: weights {wt.shape} do not match input {x.shape}")
    j = wv.shape[1]
    xf = xv.reshape(n, c, t, h * wd)
    out = np.einsum("njt,nctp->ncjp", np.broadcast_to(wv, (n, j, t)), xf, optimize=True)
    out = out.reshape(n, c, j, h, wd)
    if single:
        out = out[0]

    def bw(g):
        gf = g.reshape(n, c, j, h * wd)
        gx = gw = None
        if x.requires_grad:
            gx = np.einsum("njt,ncjp->nctp", np.broadcast_to(wv, (n, j, t)), gf, optimize=True).reshape(x.shape)
        if wt.requires_grad:
            gw = np.einsum("ncjp,nctp->njt", gf, xf, optimize=True)
            gw = gw.reshape(wt.shape) if wt.ndim == 3 else gw.sum(axis=0)
        return gx, gw
    return _make(out, (x, wt), bw, "temporal_linear")


def window_reduce(x, axis: int, factor: int, kind: str) -> Tensor:
    """Non-overlapping windows of ``factor`` along ``axis``: ``max``, ``mean`` or ``last``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if factor < 1 or n % factor:
        raise ShapeError(f"window_reduce: length {n} on axis {ax} is not divisible by {factor}")
    if kind == "last":
        return take(x, np.arange(factor - 1, n, factor), ax)
    split = x.shape[:ax] + (n // factor, factor) + x.shape[ax + 1:]
    return reduce(reshape(x, split), ax + 1, kind)


def spatial_pool(x, factor: int, kind: str = "max") -> Tensor:
    """Pool H and W by ``factor`` with non-overlapping windows."""
    if factor == 1:
        return as_tensor(x)
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"spatial_pool: {h}x{w} is not divisible by {factor}")
    lead = x.shape[:-2]
    y = reshape(x, lead + (h // factor, factor, w // factor, factor))
    return reduce(y, (len(lead) + 1, len(lead) + 3), kind)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.values, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def at(v: np.ndarray) -> float:
        out = f(Tensor(v.reshape(base.shape)))
        return float(out.values) if isinstance(out, Tensor) else float(out)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = at(flat.copy())
        flat[i] = orig - h
        fm = at(flat.copy())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max |a - n| / max(1, |n|)`` over elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
