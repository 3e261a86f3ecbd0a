"""Toy-scale two-stream detection network.

Both streams share one layout (stem, four residual stages, classifier chain);
the coarse stream adds a temporal downsampling layer after its first residual
stage and re-aligns its per-frame logits to the uniform timeline at the end.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from . import fusion as fz
from .autodiff import (
    Parameter,
    Tensor,
    concat,
    conv_pointwise,
    conv_temporal,
    reduce,
    relu,
    reshape,
    scope,
    spatial_pool,
)
from .gridpool import (
    ConfidenceHeadConfig,
    GridError,
    GridSpec,
    fixed_pool,
    fixed_pool_positions,
    grid_pool,
    grid_unpool,
    init_confidence_head,
    stride_schedule,
    upsample_from,
)

POOLINGS = ("grid", "max", "avg", "stride", "none")
FUSIONS = ("none", "late-only", "one-to-one", "multi-stage", "slowfast_det")
STAGES = ("res2", "res3", "res4", "res5")


class ConfigError(ValueError):
    pass


class ClipTooLong(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 8
    channels: tuple[int, ...] = (16, 16, 32, 48)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    spatial: int = 16
    stem_spatial_stride: int = 2
    stage_spatial_strides: tuple[int, ...] = (1, 2, 2, 2)
    temporal_kernel: int = 3
    early_temporal_kernel: int = 1
    head_channels: int = 64
    fc_channels: int = 64
    num_classes: int = 4
    alpha_ratio: int = 4
    T: int = 32
    T_prime: int = 64
    input_stride: int = 1
    pooling: str = "grid"
    two_stream: bool = True
    fusion: str = "multi-stage"
    fusion_reduce: str = "CTHW"
    fusion_mask: bool = True
    fusion_centers: str = "learned"
    sigma_divisor: float = 8.0
    # starting scale sigmoid(4) ~ 0.98 keeps stacked fusion sites from shrinking the coarse stream
    fusion_gate_bias: float = 4.0
    grid_hidden: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion_reduce not in fz.REDUCE_MODES:
            raise ConfigError(f"fusion reduce mode must be one of {fz.REDUCE_MODES}")
        if self.fusion_centers not in ("learned", "uniform"):
            raise ConfigError("fusion centers must be 'learned' or 'uniform'")
        if len(self.channels) != 4 or len(self.blocks) != 4 or len(self.stage_spatial_strides) != 4:
            raise ConfigError("channels, blocks and stage spatial strides need one entry per stage (4)")
        if not self.two_stream and self.fusion != "none":
            raise ConfigError("a single-stream network cannot have fusion; set fusion = none")
        if self.pooling != "none":
            try:
                stride_schedule(self.alpha_ratio)
            except GridError as e:
                raise ConfigError(str(e)) from None
            if self.T % self.alpha_ratio or self.T_prime % self.alpha_ratio:
                raise ConfigError(
                    f"T={self.T} and T'={self.T_prime} must be divisible by 1/alpha={self.alpha_ratio} "
                    "so that alpha*T is an integer")
        if self.T > self.T_prime:
            raise ConfigError(f"coarse segment T={self.T} cannot exceed the fine clip length T'={self.T_prime}")
        total = self.stem_spatial_stride * int(np.prod(self.stage_spatial_strides))
        if self.spatial % total:
            raise ConfigError(f"spatial size {self.spatial} is not divisible by the total spatial stride {total}")

    @property
    def ratio(self) -> int:
        return self.alpha_ratio if self.pooling != "none" else 1

    def spatial_sizes(self) -> dict[str, int]:
        s = self.spatial // self.stem_spatial_stride
        out = {}
        for name, st in zip(STAGES, self.stage_spatial_strides):
            s //= st
            out[name] = s
        return out

    def fusion_sites(self) -> list[fz.FusionSiteConfig]:
        ch = dict(zip(STAGES, self.channels))
        if self.fusion in ("none", "slowfast_det"):
            return []
        if self.fusion == "late-only":
            sites = [("res5", ("res5",))]
        elif self.fusion == "one-to-one":
            sites = [(s, (s,)) for s in STAGES]
        else:
            sites = [(s, STAGES) for s in STAGES]
        return [fz.FusionSiteConfig(site=s, levels=lv, reduce=self.fusion_reduce, mask=self.fusion_mask,
                                    channels=ch[s]) for s, lv in sites]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _conv_init(rng, shape, fan_in, gain=1.0):
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), shape)


class Model:
    """Named parameters for both streams and the fusion heads, plus the config they came from."""

    def __init__(self, config: NetworkConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def parameters(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def forward(self, features, offsets=None, T_out: Optional[int] = None, force_uniform: bool = False,
                return_grid: bool = False):
        return forward(self, features, offsets, T_out=T_out, force_uniform=force_uniform, return_grid=return_grid)


def _kernel(cfg: NetworkConfig, stage: str) -> int:
    # the stem and res2 come before the coarse stream's pooling; both streams share the kernel sizes
    return cfg.early_temporal_kernel if stage in ("stem", "res2") else cfg.temporal_kernel


def _stream_channels(cfg: NetworkConfig, stream: str) -> dict[str, int]:
    """Input channels of each stage and of the classifier (lateral concat widens them)."""
    widen = cfg.fusion == "slowfast_det" and stream == "coarse"
    ins, c_prev = {}, cfg.channels[0]
    for name, c in zip(STAGES, cfg.channels):
        ins[name] = c_prev
        c_prev = c * 2 if widen else c
    ins["head"] = c_prev
    return ins


def _init_stream(cfg: NetworkConfig, rng: np.random.Generator, prefix: str, with_head: bool) -> dict[str, Parameter]:
    p: dict[str, Parameter] = {}

    def add(name, values):
        full = f"{prefix}.{name}"
        p[full] = Parameter(full, values)

    c0 = cfg.channels[0]
    add("stem.pw.w", _conv_init(rng, (c0, cfg.in_channels), cfg.in_channels))
    add("stem.pw.b", np.zeros(c0))
    ke = cfg.early_temporal_kernel
    add("stem.t.w", _conv_init(rng, (c0, c0, ke), c0 * ke))
    add("stem.t.b", np.zeros(c0))
    ins = _stream_channels(cfg, prefix)
    for name, c_out, nb in zip(STAGES, cfg.channels, cfg.blocks):
        c_in = ins[name]
        k = _kernel(cfg, name)
        for b in range(nb):
            bn = f"{name}.b{b}"
            cin_b = c_in if b == 0 else c_out
            add(f"{bn}.pw1.w", _conv_init(rng, (c_out, cin_b), cin_b))
            add(f"{bn}.pw1.b", np.zeros(c_out))
            add(f"{bn}.t.w", _conv_init(rng, (c_out, c_out, k), c_out * k))
            add(f"{bn}.t.b", np.zeros(c_out))
            add(f"{bn}.pw2.w", _conv_init(rng, (c_out, c_out), c_out, gain=0.5))
            add(f"{bn}.pw2.b", np.zeros(c_out))
            if cin_b != c_out:
                add(f"{bn}.proj.w", _conv_init(rng, (c_out, cin_b), cin_b, gain=0.5 ** 0.5))
    if with_head:
        ch = ins["head"]
        add("head.conv5.w", _conv_init(rng, (cfg.head_channels, ch), ch))
        add("head.conv5.b", np.zeros(cfg.head_channels))
        add("head.fc1.w", _conv_init(rng, (cfg.fc_channels, cfg.head_channels), cfg.head_channels))
        add("head.fc1.b", np.zeros(cfg.fc_channels))
        add("head.fc2.w", _conv_init(rng, (cfg.num_classes, cfg.fc_channels), cfg.fc_channels, gain=0.5 ** 0.5))
        add("head.fc2.b", np.zeros(cfg.num_classes))
    return p


def build(config: NetworkConfig) -> Model:
    """Deterministically initialize every parameter from ``config.seed``.

    Each parameter group draws from its own generator keyed by the group name,
    so adding or removing fusion heads never shifts the stream weights.
    """
    cfg = config

    def rng_for(group: str) -> np.random.Generator:
        key = int.from_bytes(hashlib.sha256(group.encode()).digest()[:4], "little")
        return np.random.default_rng([cfg.seed, key])

    params: dict[str, Parameter] = {}
    params.update(_init_stream(cfg, rng_for("coarse"), "coarse", True))
    if cfg.pooling == "grid":
        hc = ConfidenceHeadConfig(ratio=cfg.alpha_ratio, hidden=cfg.grid_hidden)
        grid = init_confidence_head(hc, cfg.channels[0], rng_for("coarse.gridhead"), "coarse.gridhead")
        params = _insert_after(params, "coarse.res2.", grid)
    if cfg.two_stream:
        params.update(_init_stream(cfg, rng_for("fine"), "fine", False))
    sites = cfg.fusion_sites()
    if sites:
        ch = dict(zip(STAGES, cfg.channels))
        if cfg.fusion_mask:
            used = sorted({lv for s in sites for lv in s.levels}, key=STAGES.index)
            for lv in used:
                params.update(fz.init_mask(ch[lv], rng_for(f"fusion.mask.{lv}"), f"fusion.mask.{lv}"))
        for s in sites:
            c_in = sum(ch[lv] for lv in s.levels)
            params.update(fz.init_scale_shift(c_in, s.channels, f"fusion.{s.site}", cfg.fusion_gate_bias))
    return Model(cfg, params)


def _insert_after(params: dict, marker: str, extra: dict) -> dict:
    keys = list(params)
    last = max(i for i, k in enumerate(keys) if k.startswith(marker))
    out = {k: params[k] for k in keys[:last + 1]}
    out.update(extra)
    out.update({k: params[k] for k in keys[last + 1:]})
    return out


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _stem(P, prefix, x, cfg):
    # strided spatial stage first, as in a stride-2 spatial conv
    x = spatial_pool(x, cfg.stem_spatial_stride, "mean")
    h = relu(conv_pointwise(x, P[f"{prefix}.stem.pw.w"], P[f"{prefix}.stem.pw.b"]))
    k = _kernel(cfg, "stem")
    return relu(conv_temporal(h, P[f"{prefix}.stem.t.w"], 1, k // 2, P[f"{prefix}.stem.t.b"]))


def _stage(P, prefix, name, x, cfg, spatial_stride):
    k = _kernel(cfg, name)
    x = spatial_pool(x, spatial_stride, "max")
    nb = cfg.blocks[STAGES.index(name)]
    for b in range(nb):
        bn = f"{prefix}.{name}.b{b}"
        h = relu(conv_pointwise(x, P[f"{bn}.pw1.w"], P[f"{bn}.pw1.b"]))
        h = relu(conv_temporal(h, P[f"{bn}.t.w"], 1, k // 2, P[f"{bn}.t.b"]))
        h = conv_pointwise(h, P[f"{bn}.pw2.w"], P[f"{bn}.pw2.b"])
        short = conv_pointwise(x, P[f"{bn}.proj.w"]) if f"{bn}.proj.w" in P else x
        x = relu(short + h)
    return x


def _head(P, prefix, x):
    h = relu(conv_pointwise(x, P[f"{prefix}.head.conv5.w"], P[f"{prefix}.head.conv5.b"]))
    h = reduce(h, (-2, -1), "mean", keepdims=True)
    h = relu(conv_pointwise(h, P[f"{prefix}.head.fc1.w"], P[f"{prefix}.head.fc1.b"]))
    h = conv_pointwise(h, P[f"{prefix}.head.fc2.w"], P[f"{prefix}.head.fc2.b"])
    return reshape(h, h.shape[:3])


def fine_levels(model: Model, x: Tensor) -> dict[str, Tensor]:
    cfg, P = model.config, model.params
    out = {}
    with scope("fine"):
        h = _stem(P, "fine", x, cfg)
        for name, st in zip(STAGES, cfg.stage_spatial_strides):
            with scope(name):
                h = _stage(P, "fine", name, h, cfg, st)
            out[name] = h
    return out


def _fusion_context(model: Model, fine: dict[str, Tensor], positions: np.ndarray, T: int,
                    spans: np.ndarray) -> dict[str, Tensor]:
    """Masked fine levels, brought to the coarse frames (calibrated or time-averaged)."""
    cfg, P = model.config, model.params
    sites = cfg.fusion_sites()
    used = sorted({lv for s in sites for lv in s.levels}, key=STAGES.index)
    tp = next(iter(fine.values())).shape[-3]
    ctx = {}
    bank = None
    if cfg.fusion_reduce == "CTHW":
        centers = fz.map_to_fine(positions, T, tp, spans)
        bank = fz.gaussian_bank(centers, tp, tp / cfg.sigma_divisor)
    for lv in used:
        with scope(f"fusion.mask.{lv}"):
            xm = fz.attention_mask(fine[lv], P, f"fusion.mask.{lv}", enabled=cfg.fusion_mask)
            ctx[lv] = fz.calibrate(xm, bank) if bank is not None else reduce(xm, -3, "mean", keepdims=True)
    return ctx


def _apply_site(model, site: fz.FusionSiteConfig, x: Tensor, ctx: dict[str, Tensor]) -> Tensor:
    with scope(f"fusion.{site.site}"):
        cat = fz.multi_stage_concat([ctx[lv] for lv in site.levels])
        a, b = fz.scale_shift(cat, site, model.params, f"fusion.{site.site}")
        return fz.fuse(x, a, b)


def forward(model: Model, features, offsets=None, T_out: Optional[int] = None,
            force_uniform: bool = False, return_grid: bool = False):
    """Per-frame logits ``[N, K, T_out]`` for a batch of (already strided) clips.

    ``features`` is ``[N, C, L, H, W]``.  With ``offsets`` (train mode) the
    coarse stream sees the length-``T`` segment starting at each offset and the
    output covers that segment; without them (eval mode) it sees the whole clip.
    """
    cfg, P = model.config, model.params
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim == 4:
        x = reshape(x, (1,) + x.shape)
    n, _, length = x.shape[:3]
    if length > cfg.T_prime:
        raise ClipTooLong(f"clip of {length} strided frames exceeds T'={cfg.T_prime}; split it into segments")
    if offsets is None:
        tc = length
        xc = x
        spans = np.tile([0.0, length - 1.0], (n, 1))
    else:
        tc = cfg.T
        offs = np.asarray(offsets, dtype=np.intp)
        if np.any(offs < 0) or np.any(offs + tc > length):
            raise ValueError(f"segment offsets {offs} do not fit a length-{length} clip with T={tc}")
        if tc == length:
            xc = x
        else:
            xc = concat([reshape(x[i, :, o:o + tc], (1,) + x.shape[1:2] + (tc,) + x.shape[3:])
                         for i, o in enumerate(offs)], 0)
        spans = np.stack([offs, offs + tc - 1.0], axis=1).astype(np.float64)
    ratio = cfg.ratio
    if tc % ratio:
        raise GridError(f"coarse input length {tc} is not divisible by 1/alpha={ratio}")

    fine = fine_levels(model, x) if cfg.two_stream else None

    spec: Optional[GridSpec] = None
    with scope("coarse"):
        h = _stem(P, "coarse", xc, cfg)
        with scope("res2"):
            h = _stage(P, "coarse", "res2", h, cfg, cfg.stage_spatial_strides[0])
        with scope("pool"):
            if cfg.pooling == "grid":
                hcfg = ConfidenceHeadConfig(ratio=ratio, hidden=cfg.grid_hidden)
                h, spec = grid_pool(h, P, hcfg, "coarse.gridhead", force_uniform=force_uniform)
                positions = spec.s.values
            elif cfg.pooling == "none":
                positions = np.tile(np.arange(tc, dtype=np.float64), (n, 1))
            else:
                h = fixed_pool(h, cfg.pooling, ratio)
                positions = np.tile(fixed_pool_positions(cfg.pooling, tc, ratio), (n, 1))
    if cfg.fusion_centers == "uniform" and cfg.pooling == "grid":
        fusion_pos = np.tile(fixed_pool_positions("stride", tc, ratio), (n, 1))
    else:
        fusion_pos = positions

    sites = {s.site: s for s in cfg.fusion_sites()}
    ctx = _fusion_context(model, fine, fusion_pos, tc, spans) if sites else {}
    centers = fz.map_to_fine(fusion_pos, tc, length, spans) if cfg.fusion == "slowfast_det" else None

    with scope("coarse"):
        for i, (name, st) in enumerate(zip(STAGES, cfg.stage_spatial_strides)):
            if i > 0:
                with scope(name):
                    h = _stage(P, "coarse", name, h, cfg, st)
            if name in sites:
                h = _apply_site(model, sites[name], h, ctx)
            elif centers is not None:
                with scope(f"fusion.{name}"):
                    h = concat([h, fz.frame_correspondence(fine[name], centers)], -4)
        with scope("head"):
            logits = _head(P, "coarse", h)

    T_out = tc * cfg.input_stride if T_out is None else T_out
    with scope("unpool"):
        if cfg.pooling == "grid":
            out = grid_unpool(logits, spec, T_out)
        elif cfg.pooling == "none":
            out = upsample_from(logits, np.arange(tc, dtype=np.float64), tc, T_out)
        else:
            out = upsample_from(logits, positions[0], tc, T_out)
    if return_grid:
        return out, spec
    return out
