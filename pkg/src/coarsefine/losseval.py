"""Detection loss and per-frame multi-label mAP."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, bce_with_logits, reduce

EVAL_MODES = ("all-frames", "sampled-25")
REPORT_SCHEMA = "cfn-eval-v1"


def detection_loss(logits, labels) -> Tensor:
    """Mean of the per-frame (localization) and clip-level (classification) BCE.

    ``logits`` and ``labels`` are ``[K, T]`` or ``[N, K, T]``.  The clip-level
    logit is the temporal mean; its target is 1 when the class occurs anywhere
    in the clip.
    """
    z = as_tensor(logits)
    y = np.asarray(labels.values if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} differ")
    loc = reduce(bce_with_logits(z, y), None, "mean")
    clip_logit = reduce(z, -1, "mean")
    clip_label = (y.max(axis=-1) > 0).astype(np.float64)
    cls = reduce(bce_with_logits(clip_logit, clip_label), None, "mean")
    return (loc + cls) * 0.5


def average_precision(scores, labels) -> Optional[float]:
    """Mean precision at the rank of each positive, ranking by descending score.

    Ties keep their original order.  Returns ``None`` when there is no positive.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ")
    npos = int(y.sum())
    if npos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, npos + 1) / ranks))


@dataclass
class EvalReport:
    ap: np.ndarray                 # per class, NaN where the class has no positives
    mode: str
    frames: int
    weights: Optional[np.ndarray] = None

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.ap)

    @property
    def mAP(self) -> float:
        m = self.present
        if not m.any():
            return float("nan")
        if self.weights is None:
            return float(self.ap[m].mean())
        w = self.weights[m]
        return float((self.ap[m] * w).sum() / w.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([f"# {REPORT_SCHEMA}", f"mode={self.mode}"])
        wr.writerow(["class_id", "ap"])
        for k, a in enumerate(self.ap):
            wr.writerow([k, "absent" if np.isnan(a) else f"{a:.10f}"])
        wr.writerow(["mAP", f"{self.mAP:.10f}"])
        wr.writerow(["frames", self.frames])
        return buf.getvalue()


def sample_indices(T_out: int, mode: str) -> np.ndarray:
    if mode == "all-frames":
        return np.arange(T_out)
    if mode == "sampled-25":
        return np.floor(np.linspace(0, T_out - 1, 25)).astype(np.intp)
    raise ValueError(f"unknown evaluation mode {mode!r}; use one of {EVAL_MODES}")


def report_from_scores(scores: Sequence[np.ndarray], labels: Sequence[np.ndarray], mode: str = "all-frames",
                       class_weights: Optional[np.ndarray] = None) -> EvalReport:
    """Per-class AP over frames pooled from every clip (each ``[K, T_out]``)."""
    cols_s, cols_y = [], []
    for s, y in zip(scores, labels):
        s = np.asarray(s)
        y = np.asarray(y)
        if s.shape != y.shape:
            raise ShapeError(f"scores {s.shape} and labels {y.shape} differ")
        idx = sample_indices(s.shape[-1], mode)
        cols_s.append(s[:, idx])
        cols_y.append(y[:, idx])
    S = np.concatenate(cols_s, axis=1)
    Y = np.concatenate(cols_y, axis=1)
    ap = np.array([np.nan if (a := average_precision(S[k], Y[k])) is None else a for k in range(S.shape[0])])
    w = None if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    return EvalReport(ap=ap, mode=mode, frames=S.shape[1], weights=w)


def evaluate(model, dataset, mode: str = "all-frames", batch_size: int = 16,
             class_weights: Optional[np.ndarray] = None) -> EvalReport:
    """Run the model fully-convolutionally on every clip and score its per-frame predictions."""
    from .backbone import forward

    clips = list(dataset)
    if not clips:
        raise ValueError("cannot evaluate an empty dataset")
    stride = model.config.input_stride
    scores, labels = [], []
    for i in range(0, len(clips), batch_size):
        chunk = clips[i:i + batch_size]
        feats = np.stack([c.features[:, ::stride] for c in chunk])
        t_raw = chunk[0].labels.shape[-1]
        logits = forward(model, feats, None, T_out=t_raw).values
        scores.extend(logits)
        labels.extend(c.labels for c in chunk)
    return report_from_scores(scores, labels, mode, class_weights)
