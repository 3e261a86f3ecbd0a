"""Lateral fusion from the fine stream into the coarse stream.

Fine features are gated by a pointwise self-attention mask, averaged onto each
coarse frame with a fixed Gaussian around that frame's position on the fine
timeline, concatenated across depths, and turned into a per-site scale and
shift applied to the coarse features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv_pointwise,
    mul,
    reduce,
    reshape,
    relu,
    sigmoid,
    spatial_pool,
    take,
    temporal_linear,
)
from .gridpool import GridSpec

REDUCE_MODES = ("C", "CHW", "CTHW")


@dataclass(frozen=True)
class GaussianBank:
    centers: np.ndarray   # [J] or [N, J], positions on the fine timeline
    sigma: float
    weights: np.ndarray   # [J, T'] or [N, J, T']
    row_sums: np.ndarray  # [J] or [N, J]

    @property
    def T_prime(self) -> int:
        return self.weights.shape[-1]

    def normalized(self) -> np.ndarray:
        return self.weights / self.row_sums[..., None]


@dataclass(frozen=True)
class FusionSiteConfig:
    site: str
    levels: tuple[str, ...]
    reduce: str = "CTHW"
    mask: bool = True
    channels: int = 0

    def __post_init__(self):
        if self.reduce not in REDUCE_MODES:
            raise ValueError(f"reduce mode must be one of {REDUCE_MODES}, got {self.reduce!r}")


def gaussian_bank(centers, T_prime: int, sigma: Optional[float] = None) -> GaussianBank:
    """Peak-normalized Gaussians ``exp(-(t - mu)^2 / (2 sigma^2))`` over ``t = 0..T'-1``."""
    mu = np.asarray(centers, dtype=np.float64)
    sigma = T_prime / 8.0 if sigma is None else float(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    t = np.arange(T_prime, dtype=np.float64)
    w = np.exp(-((t - mu[..., None]) ** 2) / (2.0 * sigma * sigma))
    return GaussianBank(centers=mu, sigma=sigma, weights=w, row_sums=w.sum(-1))


def map_to_fine(positions, T: int, T_prime: int, coarse_span=None) -> np.ndarray:
    """Map coarse-timeline positions in ``[0, T-1]`` affinely into the span ``(start, end)`` of the fine clip."""
    pos = np.asarray(positions, dtype=np.float64)
    if coarse_span is None:
        span = np.array([0.0, T_prime - 1.0])
    else:
        span = np.asarray(coarse_span, dtype=np.float64)
    start, end = span[..., 0], span[..., 1]
    if np.any(end <= start):
        raise ValueError(f"degenerate coarse span {coarse_span}")
    if np.any(start < 0) or np.any(end > T_prime - 1):
        raise ValueError(f"coarse span {coarse_span} leaves the fine timeline [0, {T_prime - 1}]")
    scale = (end - start) / (T - 1) if T > 1 else np.zeros_like(start)
    if pos.ndim == 2:
        return np.asarray(start)[..., None] + pos * np.asarray(scale)[..., None]
    return start + pos * scale


def build_gaussian_bank(spec: GridSpec, T_prime: int, coarse_span=None,
                        sigma: Optional[float] = None) -> GaussianBank:
    """Coarse-centric Gaussians at the learned sampling positions ``spec.s``."""
    return gaussian_bank(map_to_fine(spec.s.values, spec.T, T_prime, coarse_span), T_prime, sigma)


def init_mask(channels: int, rng: np.random.Generator, prefix: str, hidden: Optional[int] = None) -> dict[str, Parameter]:
    hidden = hidden or channels
    return {
        f"{prefix}.w1": Parameter(f"{prefix}.w1", rng.normal(0.0, np.sqrt(2.0 / channels), (hidden, channels))),
        f"{prefix}.b1": Parameter(f"{prefix}.b1", np.zeros(hidden)),
        f"{prefix}.w2": Parameter(f"{prefix}.w2", np.zeros((channels, hidden))),
        f"{prefix}.b2": Parameter(f"{prefix}.b2", np.zeros(channels)),
    }


def attention_mask(x_fine, params: Optional[Mapping[str, Tensor]], prefix: str = "", enabled: bool = True) -> Tensor:
    """``x * sigmoid(pw(relu(pw(x))))``; returns ``x`` untouched when disabled."""
    x = as_tensor(x_fine)
    if not enabled:
        return x
    h = relu(conv_pointwise(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    g = sigmoid(conv_pointwise(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))
    return mul(x, g)


def calibrate(x_masked, bank: GaussianBank) -> Tensor:
    """Gaussian-weighted temporal average of fine features around each coarse frame."""
    x = as_tensor(x_masked)
    if x.shape[-3] != bank.T_prime:
        raise ShapeError(f"fine length {x.shape[-3]} does not match Gaussian bank length {bank.T_prime}")
    return temporal_linear(x, Tensor(bank.normalized()))


def frame_correspondence(x_fine, centers: np.ndarray) -> Tensor:
    """Pick the fine frame nearest to each coarse position (no Gaussians)."""
    x = as_tensor(x_fine)
    c = np.clip(np.rint(np.asarray(centers)), 0, x.shape[-3] - 1).astype(np.intp)
    if c.ndim == 1:
        return take(x, c, -3)
    rows = [take(x[i], c[i], -3) for i in range(c.shape[0])]
    return _stack(rows)


def _stack(rows: Sequence[Tensor]) -> Tensor:
    return concat([reshape(r, (1,) + r.shape) for r in rows], 0)


def multi_stage_concat(levels: Sequence[Tensor]) -> Tensor:
    """Max-pool every level to the smallest spatial size, then concatenate channels."""
    levels = [as_tensor(t) for t in levels]
    if len(levels) == 1:
        return levels[0]
    hn = min(t.shape[-2] for t in levels)
    wn = min(t.shape[-1] for t in levels)
    pooled = []
    for t in levels:
        h, w = t.shape[-2:]
        if h % hn or w % wn:
            raise ShapeError(f"spatial size {h}x{w} is not an integer multiple of {hn}x{wn}")
        if h // hn != w // wn:
            raise ShapeError(f"unequal spatial ratios {h // hn} and {w // wn}")
        pooled.append(spatial_pool(t, h // hn, "max"))
    return concat(pooled, -4)


def init_scale_shift(in_channels: int, out_channels: int, prefix: str, gate_bias: float = 0.0) -> dict[str, Parameter]:
    """Zero projections; ``gate_bias`` sets the starting scale to ``sigmoid(gate_bias)``."""
    return {
        f"{prefix}.A.w": Parameter(f"{prefix}.A.w", np.zeros((out_channels, in_channels))),
        f"{prefix}.A.b": Parameter(f"{prefix}.A.b", np.full(out_channels, float(gate_bias))),
        f"{prefix}.B.w": Parameter(f"{prefix}.B.w", np.zeros((out_channels, in_channels))),
        f"{prefix}.B.b": Parameter(f"{prefix}.B.b", np.zeros(out_channels)),
    }


def reduce_for_mode(x, mode: str) -> Tensor:
    """Mean-pool the axes a reduce mode leaves out (``C``: T,H,W; ``CHW``: T)."""
    x = as_tensor(x)
    if mode == "C":
        return reduce(x, (-3, -2, -1), "mean", keepdims=True)
    if mode == "CHW":
        return reduce(x, -3, "mean", keepdims=True)
    if mode == "CTHW":
        return x
    raise ValueError(f"unknown reduce mode {mode!r}")


def scale_shift(x_concat, site: FusionSiteConfig, params: Mapping[str, Tensor], prefix: str) -> tuple[Tensor, Tensor]:
    """Scale ``A`` in (0, 1) and shift ``B`` from one pointwise projection each."""
    x = reduce_for_mode(x_concat, site.reduce)
    w = params[f"{prefix}.A.w"]
    if w.shape[1] != x.shape[-4]:
        raise ShapeError(f"scale/shift projection expects {w.shape[1]} channels, got {x.shape[-4]}")
    a = sigmoid(conv_pointwise(x, w, params[f"{prefix}.A.b"]))
    b = conv_pointwise(x, params[f"{prefix}.B.w"], params[f"{prefix}.B.b"])
    return a, b


def fuse(x_coarse, a, b) -> Tensor:
    """``A * x + B``."""
    return add(mul(x_coarse, a), b)
