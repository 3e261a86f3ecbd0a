"""Learnable temporal downsampling on a non-uniform grid, and its inverse.

A light head scores every interval of ``1/alpha`` frames; the normalized
cumulative sum of ``1 - p`` places ``alpha*T`` sample points so that
high-confidence regions are sampled densely.  Unpooling maps per-frame
predictions made on that grid back onto the uniform timeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    _make,
    as_tensor,
    clamp_min,
    conv_temporal,
    cumsum,
    matmul,
    neg,
    reduce,
    relu,
    reshape,
    sigmoid,
    window_reduce,
)


class GridError(ValueError):
    """Invalid confidences or sampling positions."""


class SaturatedConfidences(GridError):
    """Confidences rounded to 0 or 1, which leaves the grid undefined."""

    def __init__(self, message: str, p: np.ndarray):
        super().__init__(message)
        self.p = np.array(p, dtype=np.float64)


class InvariantError(RuntimeError):
    """An internal monotonicity guarantee was violated."""


def stride_schedule(ratio: int, n_convs: int = 3) -> tuple[int, ...]:
    """Split a downsampling ``ratio`` into ``n_convs`` integer strides whose product is ``ratio``."""
    if int(ratio) != ratio or ratio < 1:
        raise GridError(f"1/alpha must be a positive integer, got {ratio}")
    ratio = int(ratio)
    primes = []
    r, d = ratio, 2
    while r > 1:
        while r % d == 0:
            primes.append(d)
            r //= d
        d += 1
    while len(primes) > n_convs:
        primes.sort()
        primes = [primes[0] * primes[1]] + primes[2:]
    strides = sorted(primes, reverse=True) + [1] * (n_convs - len(primes))
    return tuple(strides)


@dataclass(frozen=True)
class ConfidenceHeadConfig:
    ratio: int = 4
    hidden: int = 8
    kernel_sizes: tuple[int, ...] = (3, 3, 3)
    strides: Optional[tuple[int, ...]] = None

    def resolved_strides(self) -> tuple[int, ...]:
        strides = self.strides or stride_schedule(self.ratio, len(self.kernel_sizes))
        if int(np.prod(strides)) != self.ratio:
            raise GridError(f"head strides {strides} do not multiply to 1/alpha = {self.ratio}")
        if len(strides) != len(self.kernel_sizes):
            raise GridError("need one stride per head convolution")
        return tuple(strides)


def init_confidence_head(cfg: ConfidenceHeadConfig, in_channels: int, rng: np.random.Generator,
                         prefix: str) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    n = len(cfg.kernel_sizes)
    c_in = in_channels
    for i, k in enumerate(cfg.kernel_sizes):
        last = i == n - 1
        c_out = 1 if last else cfg.hidden
        std = np.sqrt(2.0 / (c_in * k))
        w = np.zeros((c_out, c_in, k)) if last else rng.normal(0.0, std, (c_out, c_in, k))
        params[f"{prefix}.conv{i}.w"] = Parameter(f"{prefix}.conv{i}.w", w)
        params[f"{prefix}.conv{i}.b"] = Parameter(f"{prefix}.conv{i}.b", np.zeros(c_out))
        c_in = c_out
    return params


def confidence_logits(x: Tensor, params: Mapping[str, Tensor], cfg: ConfidenceHeadConfig,
                      prefix: str) -> Tensor:
    """Pre-sigmoid confidences, shape ``[alpha*T]`` (or ``[N, alpha*T]``)."""
    t = x.shape[-3]
    if t % cfg.ratio:
        raise GridError(f"temporal length {t} is not divisible by 1/alpha = {cfg.ratio}")
    h = x
    strides = cfg.resolved_strides()
    for i, (k, st) in enumerate(zip(cfg.kernel_sizes, strides)):
        h = conv_temporal(h, params[f"{prefix}.conv{i}.w"], stride=st, padding=k // 2,
                          bias=params[f"{prefix}.conv{i}.b"])
        if i < len(strides) - 1:
            h = relu(h)
    h = reduce(h, (-2, -1), "mean")
    return reshape(h, h.shape[:-2] + (h.shape[-1],))


def confidence_head(x: Tensor, params: Mapping[str, Tensor], cfg: ConfidenceHeadConfig,
                    prefix: str) -> Tensor:
    """Per-interval confidences ``p`` in (0, 1), shape ``[alpha*T]`` (or ``[N, alpha*T]``)."""
    return sigmoid(confidence_logits(x, params, cfg, prefix))


@dataclass(frozen=True)
class GridSpec:
    """The learned sampling plan for one clip (or a batch of clips along the first axis).

    ``q`` holds 1-based cumulative grid locations ending exactly at ``T``;
    ``s = max(q - 1, 0)`` are the zero-based positions actually sampled.
    """

    T: int
    ratio: int
    p: Tensor
    q: Tensor
    s: Tensor

    @property
    def alpha(self) -> float:
        return 1.0 / self.ratio

    @property
    def length(self) -> int:
        return self.T // self.ratio

    def detached(self) -> "GridSpec":
        return GridSpec(self.T, self.ratio, Tensor(self.p.values), Tensor(self.q.values), Tensor(self.s.values))


def compute_grid(p, T: int, complement=None) -> GridSpec:
    """Place ``len(p)`` grid points on ``[0, T]`` from the normalized cdf of ``1 - p``.

    ``complement`` may supply ``1 - p`` computed without cancellation (such as
    ``sigmoid(-z)`` for ``p = sigmoid(z)``), which stays positive long after
    ``p`` itself has rounded to 1.
    """
    p = as_tensor(p)
    pv = p.values
    if complement is None:
        if not (np.all(pv > 0.0) and np.all(pv < 1.0)):
            raise SaturatedConfidences("confidences must lie strictly inside (0, 1)", pv)
        w = 1.0 - p
    else:
        w = as_tensor(complement)
        if w.shape != p.shape:
            raise ShapeError(f"complement {w.shape} does not match confidences {p.shape}")
        wv = w.values
        if not (np.all(np.isfinite(pv)) and np.all(wv > 0.0) and np.all(wv <= 1.0)):
            raise SaturatedConfidences("confidences must lie strictly inside (0, 1)", pv)
    j = p.shape[-1]
    if T % j:
        raise GridError(f"T={T} is not a multiple of the grid length {j}")
    c = cumsum(w, axis=-1)
    q = (c / c[..., -1:]) * float(T)
    s = clamp_min(q - 1.0, 0.0)
    return GridSpec(T=T, ratio=T // j, p=p, q=q, s=s)


def uniform_grid(T: int, ratio: int, batch: Optional[int] = None) -> GridSpec:
    shape = (T // ratio,) if batch is None else (batch, T // ratio)
    return compute_grid(Tensor(np.full(shape, 0.5)), T)


def _as_nabm(x: np.ndarray, axis: int) -> tuple[np.ndarray, tuple]:
    """View ``x`` (leading batch axis) as ``[N, A, T, B]`` around ``axis``."""
    n = x.shape[0]
    a = int(np.prod(x.shape[1:axis], dtype=np.int64))
    b = int(np.prod(x.shape[axis + 1:], dtype=np.int64))
    return x.reshape(n, a, x.shape[axis], b), (n, a, b)


def interp_along(x, pos, axis: int) -> Tensor:
    """Linearly interpolate ``x`` along ``axis`` at fractional positions ``pos``.

    ``x`` carries a leading batch axis that ``pos`` (``[N, M]``) shares.  The
    bracket is ``[i0, i0 + 1]`` with ``i0 = min(floor(pos), T - 2)``, so at an
    exact integer the position gradient is the forward frame difference.
    """
    x, pos = as_tensor(x), as_tensor(pos)
    ax = axis % x.ndim
    if ax == 0:
        raise ShapeError("interp_along cannot interpolate along the batch axis")
    t = x.shape[ax]
    pv = pos.values
    if pv.ndim != 2 or pv.shape[0] != x.shape[0]:
        raise ShapeError(f"positions {pos.shape} do not match batch of input {x.shape}")
    if np.any(pv < 0.0) or np.any(pv > t - 1):
        raise GridError(f"sampling positions outside [0, {t - 1}]: min {pv.min()}, max {pv.max()}")
    xv, (n, a, b) = _as_nabm(x.values, ax)
    m = pv.shape[1]
    if t == 1:
        i0 = np.zeros(pv.shape, dtype=np.intp)
        i1 = i0
        w = np.zeros_like(pv)
    else:
        i0 = np.minimum(np.floor(pv).astype(np.intp), t - 2)
        i1 = i0 + 1
        w = pv - i0
    idx0 = np.broadcast_to(i0[:, None, :, None], (n, a, m, b))
    idx1 = np.broadcast_to(i1[:, None, :, None], (n, a, m, b))
    x0 = np.take_along_axis(xv, idx0, axis=2)
    x1 = np.take_along_axis(xv, idx1, axis=2)
    wb = w[:, None, :, None]
    out = ((1.0 - wb) * x0 + wb * x1).reshape(x.shape[:ax] + (m,) + x.shape[ax + 1:])

    def bw(g):
        gv = g.reshape(n, a, m, b)
        gx = gp = None
        if x.requires_grad:
            gxv = np.zeros_like(xv)
            ni = np.arange(n)[:, None, None, None]
            ai = np.arange(a)[None, :, None, None]
            bi = np.arange(b)[None, None, None, :]
            np.add.at(gxv, (ni, ai, idx0, bi), (1.0 - wb) * gv)
            np.add.at(gxv, (ni, ai, idx1, bi), wb * gv)
            gx = gxv.reshape(x.shape)
        if pos.requires_grad:
            gp = np.einsum("namb,namb->nm", gv, x1 - x0)
            if t == 1:
                gp = np.zeros_like(gp)
        return gx, gp
    return _make(out, (x, pos), bw, "interp")


def grid_sample(x, s) -> Tensor:
    """Sample ``x`` (``[C,T,H,W]`` or ``[N,C,T,H,W]``) at fractional frame indices ``s``."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim == 4:
        if s.ndim != 1:
            raise ShapeError(f"unbatched input needs 1-d positions, got {s.shape}")
        out = interp_along(reshape(x, (1,) + x.shape), reshape(s, (1,) + s.shape), 2)
        return reshape(out, out.shape[1:])
    if x.ndim != 5:
        raise ShapeError(f"grid_sample expects a 4-d or 5-d feature map, got {x.shape}")
    return interp_along(x, s, 2)


def grid_pool(x: Tensor, params: Mapping[str, Tensor], cfg: ConfidenceHeadConfig,
              prefix: str, force_uniform: bool = False) -> tuple[Tensor, GridSpec]:
    """Confidence head, cdf grid and interpolation in one step."""
    t = x.shape[-3]
    if force_uniform:
        batch = None if x.ndim == 4 else x.shape[0]
        spec = uniform_grid(t, cfg.ratio, batch)
    else:
        z = confidence_logits(x, params, cfg, prefix)
        spec = compute_grid(sigmoid(z), t, complement=sigmoid(neg(z)))
    return grid_sample(x, spec.s), spec


def fixed_pool(x, kind: str, factor: int) -> Tensor:
    """Temporal max / average / strided pooling with window = stride = ``factor``."""
    kinds = {"max": "max", "avg": "mean", "stride": "last"}
    if kind not in kinds:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return window_reduce(x, -3, factor, kinds[kind])


def fixed_pool_positions(kind: str, T: int, factor: int) -> np.ndarray:
    """Timeline position represented by each pooled frame."""
    j = np.arange(T // factor, dtype=np.float64)
    if kind == "stride":
        return (j + 1.0) * factor - 1.0
    return (j + 0.5) * factor - 0.5


def inverse_grid_map(knots, targets) -> Tensor:
    """Invert the piecewise-linear map ``j -> knots[j]`` at ``targets``, clamped to ``[0, J-1]``.

    ``knots`` is ``[N, J]`` and non-decreasing per row; ``targets`` is a
    constant ``[M]`` array.  Differentiable in ``knots``.  Knots that tie in
    floating point (increments below one ulp) are harmless: the segment search
    always lands on the last of the tied knots, so no zero-length segment is
    ever divided by.
    """
    knots = as_tensor(knots)
    kv = knots.values
    tv = np.asarray(targets, dtype=np.float64)
    if kv.ndim != 2:
        raise ShapeError(f"knots must be [N, J], got {kv.shape}")
    if np.any(np.diff(kv, axis=-1) < 0):
        raise InvariantError("grid map is decreasing")
    n, j = kv.shape
    seg = (kv[:, None, :] <= tv[None, :, None]).sum(-1) - 1
    low = seg < 0
    high = seg >= j - 1
    k = np.clip(seg, 0, j - 2) if j > 1 else np.zeros_like(seg)
    rows = np.arange(n)[:, None]
    if j > 1:
        lo = kv[rows, k]
        d = kv[rows, k + 1] - lo
        # tied knots only ever meet clamped targets, whose value ignores d
        d = np.where(d > 0, d, 1.0)
        f = (tv[None, :] - lo) / d
    else:
        d = np.ones_like(seg, dtype=np.float64)
        f = np.zeros_like(seg, dtype=np.float64)
    v = np.where(low, 0.0, np.where(high, float(j - 1), k + f))
    inside = ~(low | high)

    def bw(g):
        gk = np.zeros_like(kv)
        if j > 1:
            np.add.at(gk, (np.broadcast_to(rows, k.shape), k), np.where(inside, g * (f - 1.0) / d, 0.0))
            np.add.at(gk, (np.broadcast_to(rows, k.shape), k + 1), np.where(inside, -g * f / d, 0.0))
        return (gk,)
    return _make(v, (knots,), bw, "inverse_grid_map")


def resample_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Constant ``[len(dst), len(src)]`` linear-interpolation weights; constant outside ``src``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.zeros((dst.size, src.size))
    if src.size == 1:
        w[:, 0] = 1.0
        return w
    for i, x in enumerate(dst):
        if x <= src[0]:
            w[i, 0] = 1.0
        elif x >= src[-1]:
            w[i, -1] = 1.0
        else:
            k = int(np.searchsorted(src, x, side="right")) - 1
            f = (x - src[k]) / (src[k + 1] - src[k])
            w[i, k] = 1.0 - f
            w[i, k + 1] = f
    return w


def resize_positions(T: int, T_out: int) -> np.ndarray:
    """Position on a length-``T`` timeline of each of ``T_out`` output frames."""
    return np.minimum(np.arange(T_out, dtype=np.float64) * T / T_out, T - 1)


def upsample_from(y, positions: np.ndarray, T: int, T_out: Optional[int] = None) -> Tensor:
    """Interpolate ``y[..., J]`` known at ``positions`` onto frames ``0..T-1``, then onto ``T_out``."""
    y = as_tensor(y)
    w = resample_matrix(positions, np.arange(T, dtype=np.float64))
    if T_out is not None and T_out != T:
        w = resample_matrix(np.arange(T, dtype=np.float64), resize_positions(T, T_out)) @ w
    return matmul(y, Tensor(w.T))


def grid_unpool(y, spec: GridSpec, T_out: Optional[int] = None) -> Tensor:
    """Re-align per-frame predictions ``y[K, alpha*T]`` made on a learned grid to the uniform timeline.

    The sampled grid locations (unclamped, ``q - 1``) define a monotone map from
    coarse index to timeline position.  Its inverse, taken at the uniform-stride
    positions, tells where each uniform coarse slot falls on the learned grid;
    ``y`` is resampled there and then interpolated onto every frame.
    """
    y = as_tensor(y)
    T = spec.T
    T_out = T if T_out is None else T_out
    if T_out < T:
        raise ShapeError(f"T_out={T_out} is shorter than the grid input length {T}")
    single = y.ndim == 2
    q = spec.q
    if single:
        y = reshape(y, (1,) + y.shape)
        q = reshape(q, (1,) + q.shape)
    j = q.shape[-1]
    if y.shape[-1] != j:
        raise ShapeError(f"predictions have length {y.shape[-1]}, grid has {j}")
    u = fixed_pool_positions("stride", T, spec.ratio)
    v = inverse_grid_map(q - 1.0, u)
    yhat = interp_along(y, v, y.ndim - 1)
    out = upsample_from(yhat, u, T, T_out)
    return reshape(out, out.shape[1:]) if single else out
