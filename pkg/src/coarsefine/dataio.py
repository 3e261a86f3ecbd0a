"""Synthetic bursty-activity clips, the ``CFNT`` tensor container, annotations and checkpoints.

Tensor container layout (all little-endian)::

    b"CFNT" | u16 version (=1) | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u32 dims | payload
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

MAGIC = b"CFNT"
TENSOR_VERSION = 1
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class BadVersion(FormatError):
    pass


class Truncated(FormatError):
    pass


class BadDtype(FormatError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class InfeasibleSpec(ValueError):
    pass


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------

def encode_tensor(arr) -> bytes:
    a = np.asarray(arr.values if hasattr(arr, "values") else arr)
    if a.dtype not in _CODES:
        a = a.astype(np.float64)
    code = _CODES[a.dtype]
    header = MAGIC + struct.pack("<HBB", TENSOR_VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("bad magic: not a CFNT tensor file")
    if len(buf) < 8:
        raise Truncated("truncated header")
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != TENSOR_VERSION:
        raise BadVersion(f"unsupported tensor format version {version} (expected {TENSOR_VERSION})")
    if code not in _DTYPES:
        raise BadDtype(f"unknown dtype code {code}")
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise Truncated("truncated shape block")
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    dt = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - off < nbytes:
        raise Truncated(f"payload has {len(buf) - off} bytes, expected {nbytes}")
    if len(buf) - off > nbytes:
        raise FormatError(f"{len(buf) - off - nbytes} trailing bytes after payload")
    return np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def write_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# clips and annotations
# ---------------------------------------------------------------------------

@dataclass
class DetectionClip:
    clip_id: str
    features: np.ndarray            # [C, T_raw, H, W]
    labels: np.ndarray              # [K, T_raw] of {0, 1}
    intervals: list = field(default_factory=list)  # [class, start, end) triples
    stride: int = 1

    def __post_init__(self):
        if self.labels.shape[-1] != self.features.shape[1]:
            raise ValueError(f"{self.clip_id}: label length {self.labels.shape[-1]} != "
                             f"feature length {self.features.shape[1]}")

    @property
    def num_classes(self) -> int:
        return self.labels.shape[0]

    @property
    def T_raw(self) -> int:
        return self.features.shape[1]


def labels_from_intervals(intervals, num_classes: int, T_raw: int) -> np.ndarray:
    y = np.zeros((num_classes, T_raw), dtype=np.uint8)
    for k, a, b in intervals:
        y[int(k), int(a):int(b)] = 1
    return y


def annotation_line(clip: DetectionClip) -> str:
    rec = {"clip_id": clip.clip_id, "num_classes": clip.num_classes, "T_raw": clip.T_raw,
           "intervals": [[int(k), int(a), int(b)] for k, a, b in clip.intervals]}
    return json.dumps(rec, separators=(",", ":"))


def parse_annotation(line: str) -> dict:
    rec = json.loads(line)
    missing = {"clip_id", "num_classes", "T_raw", "intervals"} - set(rec)
    if missing:
        raise FormatError(f"annotation is missing {sorted(missing)}")
    for k, a, b in rec["intervals"]:
        if not (0 <= k < rec["num_classes"] and 0 <= a < b <= rec["T_raw"]):
            raise FormatError(f"bad interval {[k, a, b]} in clip {rec['clip_id']}")
    return rec


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Labelled events over low-amplitude noise.

    Every event window carries a weak class-agnostic marker; somewhere inside
    it a ``burst_len``-frame oscillation along a class-specific channel code is
    the only thing that tells the classes apart.  ``duration`` is the event
    length range and ``bursts`` the range of events per clip.
    """

    num_clips: int = 192
    num_classes: int = 4
    T_raw: int = 64
    channels: int = 8
    spatial: int = 16
    bursts: tuple[int, int] = (1, 3)
    duration: tuple[int, int] = (8, 16)
    burst_len: int = 2
    carrier: tuple[float, float] = (0.4, 0.5)
    amplitude: float = 1.0
    marker: float = 0.5
    noise: float = 0.3
    min_gap: int = 2
    seed: int = 0
    prefix: str = "clip"
    stride: int = 1
    first_index: int = 0

    def validate(self) -> None:
        lo, hi = self.bursts
        if not 0 <= lo <= hi:
            raise InfeasibleSpec(f"event count range {self.bursts} is invalid")
        dlo, dhi = self.duration
        if not 1 <= dlo <= dhi:
            raise InfeasibleSpec(f"event duration range {self.duration} is invalid")
        if not 1 <= self.burst_len <= dlo:
            raise InfeasibleSpec(f"burst length {self.burst_len} must be in [1, {dlo}] (the shortest event)")
        if hi * (dhi + self.min_gap) + self.min_gap > self.T_raw:
            raise InfeasibleSpec(
                f"{hi} events of up to {dhi} frames with gaps of {self.min_gap} do not fit in {self.T_raw} frames")
        if self.num_classes < 1 or self.channels < 1:
            raise InfeasibleSpec("need at least one class and one channel")
        if self.stride < 1:
            raise InfeasibleSpec("input stride must be at least 1")


def class_codes(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-class channel sign codes and carrier frequencies (cycles per frame)."""
    rng = np.random.default_rng([spec.seed, 0xC0DE])
    codes = rng.choice([-1.0, 1.0], size=(spec.num_classes, spec.channels))
    freqs = np.linspace(spec.carrier[0], spec.carrier[1], spec.num_classes)
    return codes, freqs


def marker_code(spec: SynthSpec) -> np.ndarray:
    return np.random.default_rng([spec.seed, 0xE7E7]).choice([-1.0, 1.0], size=spec.channels)


def _place_events(rng: np.random.Generator, spec: SynthSpec) -> list[list[int]]:
    n = int(rng.integers(spec.bursts[0], spec.bursts[1] + 1))
    durs = rng.integers(spec.duration[0], spec.duration[1] + 1, size=n)
    slack = spec.T_raw - int(durs.sum()) - spec.min_gap * (n + 1)
    if slack < 0:
        raise InfeasibleSpec("event packing infeasible")
    # distribute the free frames over the n+1 gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts, [slack]])) + spec.min_gap
    out, t = [], int(gaps[0])
    for i in range(n):
        d = int(durs[i])
        k = int(rng.integers(0, spec.num_classes))
        out.append([k, t, t + d])
        t += d + int(gaps[i + 1])
    return out


def make_clip(spec: SynthSpec, index: int, codes: np.ndarray, freqs: np.ndarray,
              marker: Optional[np.ndarray] = None) -> DetectionClip:
    rng = np.random.default_rng([spec.seed, index])
    intervals = _place_events(rng, spec)
    T, C, S, L = spec.T_raw, spec.channels, spec.spatial, spec.burst_len
    m = marker_code(spec) if marker is None else marker
    x = rng.normal(0.0, spec.noise, size=(C, T, S, S))
    for k, a, b in intervals:
        x[:, a:b] += spec.marker * m[:, None, None, None]
        start = int(rng.integers(a, b - L + 1))
        phase = rng.uniform(-0.5, 0.5)
        wave = np.cos(2.0 * np.pi * freqs[k] * np.arange(L) + phase)
        x[:, start:start + L] += spec.amplitude * codes[k][:, None, None, None] * wave[None, :, None, None]
    labels = labels_from_intervals(intervals, spec.num_classes, T)
    return DetectionClip(f"{spec.prefix}{index:05d}", x, labels, intervals, spec.stride)


def generate(spec: SynthSpec) -> list[DetectionClip]:
    """Deterministic dataset; clip ``i`` depends only on ``(seed, i)``."""
    spec.validate()
    codes, freqs = class_codes(spec)
    m = marker_code(spec)
    return [make_clip(spec, i, codes, freqs, m) for i in range(spec.first_index, spec.first_index + spec.num_clips)]


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def save_dataset(clips: Sequence[DetectionClip], root, meta: Optional[dict] = None) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    for c in clips:
        write_tensor(root / "features" / f"{c.clip_id}.cfnt", c.features)
    with open(root / "annotations.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for c in clips:
            fh.write(annotation_line(c) + "\n")
    manifest = {"format": "cfn-dataset", "version": 1, "clips": [c.clip_id for c in clips],
                "stride": clips[0].stride if clips else 1, "meta": meta or {}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(root) -> list[DetectionClip]:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {root}")
    manifest = json.loads((root / "manifest.json").read_text())
    stride = int(manifest.get("stride", 1))
    clips = []
    with open(root / "annotations.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = parse_annotation(line)
            feats = read_tensor(root / "features" / f"{rec['clip_id']}.cfnt")
            labels = labels_from_intervals(rec["intervals"], rec["num_classes"], rec["T_raw"])
            clips.append(DetectionClip(rec["clip_id"], feats, labels, rec["intervals"], stride))
    return clips


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _safe(name: str) -> str:
    return name.replace("/", "_") + ".cfnt"


def save_checkpoint(model, path, extra: Optional[dict] = None, buffers: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Directory of one tensor file per parameter plus ``manifest.json``."""
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.params.items():
        write_tensor(root / "params" / _safe(name), p.values)
        entries.append({"name": name, "shape": list(p.shape), "file": f"params/{_safe(name)}"})
    buf_entries = []
    if buffers:
        (root / "buffers").mkdir(exist_ok=True)
        for name in sorted(buffers):
            write_tensor(root / "buffers" / _safe(name), buffers[name])
            buf_entries.append({"name": name, "file": f"buffers/{_safe(name)}"})
    manifest = {
        "format": "cfn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config_hash": model.config.digest(),
        "config": model.config.to_dict(),
        "params": entries,
        "buffers": buf_entries,
        "extra": extra or {},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    mf = Path(path) / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != "cfn-checkpoint":
        raise CheckpointError(f"{path} is not a checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {manifest.get('version')} is incompatible with this build (expects {CHECKPOINT_VERSION})")
    return manifest


def _is_fusion(name: str) -> bool:
    return name.startswith("fusion.")


def load_checkpoint(model, path, rename: Optional[Mapping[str, str]] = None) -> dict:
    """Load parameters by name; returns the manifest.

    A checkpoint may cover only part of the model: fusion heads may be absent,
    and so may a whole stream that the checkpoint has no entries for (this is
    how two separately trained streams are combined).  A checkpoint entry for
    the fine stream's classifier is ignored when the model has none.  Anything
    else that does not line up is an error.
    """
    root = Path(path)
    manifest = read_manifest(root)
    tensors = {}
    for e in manifest["params"]:
        name = e["name"]
        for old, new in (rename or {}).items():
            if name.startswith(old):
                name = new + name[len(old):]
                break
        tensors[name] = (e, root / e["file"])
    unexpected = [n for n in tensors if n not in model.params and not n.startswith("fine.head.")]
    covered = {n.split(".", 1)[0] for n in tensors}
    missing = [n for n in model.params if n not in tensors
               and not _is_fusion(n) and n.split(".", 1)[0] in covered]
    shape_bad = [n for n, (e, _) in tensors.items() if n in model.params
                 and tuple(e["shape"]) != model.params[n].shape]
    if unexpected or missing or shape_bad:
        parts = []
        if unexpected:
            parts.append(f"unexpected: {unexpected}")
        if missing:
            parts.append(f"missing: {missing}")
        if shape_bad:
            parts.append(f"shape mismatch: {shape_bad}")
        raise CheckpointError("checkpoint does not match model; " + "; ".join(parts))
    for n, (_, f) in tensors.items():
        if n in model.params:
            model.params[n].values = read_tensor(f).astype(np.float64, copy=True)
    return manifest


def load_buffers(path) -> dict[str, np.ndarray]:
    root = Path(path)
    manifest = read_manifest(root)
    return {e["name"]: read_tensor(root / e["file"]).copy() for e in manifest.get("buffers", [])}
