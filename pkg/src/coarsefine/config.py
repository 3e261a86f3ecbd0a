"""Run configuration: a flat ``key = value`` document with dotted section keys.

Grammar (one entry per line)::

    line    := blank | comment | entry
    comment := "#" any*
    entry   := key ws* "=" ws* value ws* [comment]
    key     := "seed" | section "." field
    section := "net" | "data" | "optim" | "train" | "eval" | "paths"
    value   := scalar | scalar ("," scalar)+        (tuples are comma separated)
    scalar  := integer | float | "true" | "false" | bare-string

Later entries override earlier ones; a key that does not name a known field is
an error.  Presets are named override sets applied before the file.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .backbone import ConfigError, NetworkConfig
from .dataio import SynthSpec
from .losseval import EVAL_MODES
from .train import OptimConfig

EVAL_CHOICES = EVAL_MODES + ("all",)

# network fields that follow the data or the run seed instead of being set directly
_NET_DERIVED = ("in_channels", "spatial", "num_classes", "seed")
# dataset fields owned by the generator plumbing
_DATA_DERIVED = ("first_index", "prefix", "stride")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 8
    overfit_steps: int = 0
    overfit_target: float = 0.0
    val_clips: int = 64


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "all-frames"


@dataclass(frozen=True)
class PathConfig:
    data: str = "data"
    out: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    net: NetworkConfig = field(default_factory=NetworkConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    seed: int = 0

    def network(self) -> NetworkConfig:
        """The network configuration with data-derived sizes and the run seed filled in."""
        return replace(self.net, in_channels=self.data.channels, spatial=self.data.spatial,
                       num_classes=self.data.num_classes, seed=self.seed)

    def train_spec(self) -> SynthSpec:
        return replace(self.data, prefix="train", stride=self.net.input_stride)

    def val_spec(self) -> SynthSpec:
        # validation clips come from a disjoint index range of the same generator
        return replace(self.data, num_clips=self.train.val_clips, first_index=self.data.num_clips,
                       prefix="val", stride=self.net.input_stride)

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {"seed": self.seed}
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                if _settable(sec, f.name):
                    out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_flat().items())


_SECTIONS = ("net", "data", "optim", "train", "eval", "paths")


def _settable(section: str, name: str) -> bool:
    if section == "net":
        return name not in _NET_DERIVED
    if section == "data":
        return name not in _DATA_DERIVED
    return True


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _convert(raw: str, tp: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p.strip() for p in raw.split(",")] if raw else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(p, args[0], key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {raw!r}")
        return tuple(_convert(p, a, key) for p, a in zip(parts, args))
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    if tp is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if tp is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` pairs in file order; syntax errors name the line."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def apply_overrides(cfg: RunConfig, items: Mapping[str, Any]) -> RunConfig:
    """Set dotted keys; string values are parsed by the field's type, others used as given."""
    sections: dict[str, dict[str, Any]] = {}
    seed = cfg.seed
    for key, value in items.items():
        if key == "seed":
            seed = _convert(value, int, key) if isinstance(value, str) else int(value)
            continue
        sec, _, name = key.partition(".")
        if sec not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, sec)
        hints = typing.get_type_hints(type(obj))
        if name not in hints or not _settable(sec, name):
            raise ConfigError(f"unknown config key {key!r}")
        sections.setdefault(sec, {})[name] = _convert(value, hints[name], key) if isinstance(value, str) else value
    try:
        updated = {sec: replace(getattr(cfg, sec), **vals) for sec, vals in sections.items()}
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    out = replace(cfg, seed=seed, **updated)
    validate(out)
    return out


def validate(cfg: RunConfig) -> None:
    if cfg.eval.mode not in EVAL_CHOICES:
        raise ConfigError(f"eval.mode must be one of {EVAL_CHOICES}, got {cfg.eval.mode!r}")
    if cfg.train.epochs < 0 or cfg.train.batch_size < 1 or cfg.train.val_clips < 1:
        raise ConfigError("train.epochs must be >= 0, train.batch_size and train.val_clips >= 1")
    if cfg.train.batch_size > cfg.data.num_clips:
        raise ConfigError(f"train.batch_size {cfg.train.batch_size} exceeds data.num_clips {cfg.data.num_clips}")
    if cfg.optim.lr <= 0:
        raise ConfigError("optim.lr must be positive")
    strided = cfg.data.T_raw // cfg.net.input_stride
    if cfg.data.T_raw % cfg.net.input_stride:
        raise ConfigError(f"data.T_raw={cfg.data.T_raw} is not divisible by net.input_stride={cfg.net.input_stride}")
    if strided > cfg.net.T_prime:
        raise ConfigError(f"strided clips have {strided} frames, more than net.T_prime={cfg.net.T_prime}")
    if strided < cfg.net.T:
        raise ConfigError(f"strided clips have {strided} frames, fewer than the coarse segment net.T={cfg.net.T}")
    try:
        cfg.data.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_FINE_FINE = {"net.pooling": "none", "net.two_stream": True, "net.fusion": "multi-stage"}
_COARSE_ONLY = {"net.pooling": "grid", "net.two_stream": False, "net.fusion": "none"}

PRESETS: dict[str, dict[str, Any]] = {
    # the full-scale schedule (lr 0.02 divided by 10 at epochs 60 and 80); far beyond a desk budget
    "long-schedule": {"optim.lr": 0.02, "optim.milestones": (60, 80), "train.epochs": 100, "train.batch_size": 16},
    "coarse-fine": {"net.pooling": "grid", "net.two_stream": True, "net.fusion": "multi-stage"},
    "fine-fine": dict(_FINE_FINE),
    "coarse-only": dict(_COARSE_ONLY),
    "slowfast-det": {"net.pooling": "stride", "net.two_stream": True, "net.fusion": "slowfast_det"},
    # fusion location (Fine-Fine)
    "table3a-late": {**_FINE_FINE, "net.fusion": "late-only"},
    "table3a-one-to-one": {**_FINE_FINE, "net.fusion": "one-to-one"},
    "table3a-multi-stage": dict(_FINE_FINE),
    # fusion dimensions (Fine-Fine)
    "table3b-C": {**_FINE_FINE, "net.fusion_reduce": "C"},
    "table3b-CHW": {**_FINE_FINE, "net.fusion_reduce": "CHW"},
    "table3b-CTHW": {**_FINE_FINE, "net.fusion_reduce": "CTHW"},
    # fusion mask (Fine-Fine)
    "table3c-late-none": {**_FINE_FINE, "net.fusion": "late-only", "net.fusion_mask": False},
    "table3c-late-attention": {**_FINE_FINE, "net.fusion": "late-only", "net.fusion_mask": True},
    "table3c-none": {**_FINE_FINE, "net.fusion_mask": False},
    "table3c-attention": {**_FINE_FINE, "net.fusion_mask": True},
    # pooling type (Coarse-only)
    "table3d-max": {**_COARSE_ONLY, "net.pooling": "max"},
    "table3d-avg": {**_COARSE_ONLY, "net.pooling": "avg"},
    "table3d-stride": {**_COARSE_ONLY, "net.pooling": "stride"},
    "table3d-grid": dict(_COARSE_ONLY),
    # grid pool input length and ratio (Coarse-only); both inputs span the whole clip
    "table3e-t32-a4": {**_COARSE_ONLY, "net.input_stride": 2, "net.T": 32, "net.T_prime": 32, "net.alpha_ratio": 4},
    "table3e-t32-a8": {**_COARSE_ONLY, "net.input_stride": 2, "net.T": 32, "net.T_prime": 32, "net.alpha_ratio": 8},
    "table3e-t64-a4": {**_COARSE_ONLY, "net.input_stride": 1, "net.T": 64, "net.T_prime": 64, "net.alpha_ratio": 4},
    "table3e-t64-a8": {**_COARSE_ONLY, "net.input_stride": 1, "net.T": 64, "net.T_prime": 64, "net.alpha_ratio": 8},
    # grid pool and fusion combined (two-stream)
    "table3f-slowfast-det": {"net.pooling": "stride", "net.two_stream": True, "net.fusion": "slowfast_det"},
    "table3f-slowfast-det-grid": {"net.pooling": "grid", "net.two_stream": True, "net.fusion": "slowfast_det"},
    "table3f-slowfast-det-fusion": {"net.pooling": "stride", "net.two_stream": True, "net.fusion": "multi-stage"},
    "table3f-coarse-fine": {"net.pooling": "grid", "net.two_stream": True, "net.fusion": "multi-stage"},
}


def load(path: Optional[str | Path] = None, preset: Optional[str] = None,
         overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the preset, then the file, then explicit overrides."""
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cfg = apply_overrides(cfg, PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        cfg = apply_overrides(cfg, parse_text(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def loads(text: str) -> RunConfig:
    return apply_overrides(RunConfig(), parse_text(text))
