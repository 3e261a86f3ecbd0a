"""Finite-difference verification of every differentiable operator of the model.

Each case builds small random inputs from a seed, reduces the operator's
output to a scalar with a fixed random projection, and compares the reverse
mode gradient of every input against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from . import fusion as fz
from .autodiff import Tensor, backward, finite_diff_grad, max_rel_error, mul, reduce
from .gridpool import ConfidenceHeadConfig, compute_grid, confidence_head, grid_sample, grid_unpool
from .losseval import detection_loss

TOLERANCE = 1e-4
STEP = 1e-4

# a case maps a generator to (inputs, fn); fn takes a dict of tensors keyed like the inputs
Case = Callable[[np.random.Generator], tuple[dict[str, np.ndarray], Callable[[dict[str, Tensor]], Tensor]]]


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    seeds: int
    worst_seed: int
    worst_input: str
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < TOLERANCE)


def _probs(rng, shape):
    # keep confidences away from 0 and 1 so that no sample sits on the low-end clamp
    return rng.uniform(0.1, 0.9, size=shape)


def _confidence_head(rng):
    cfg = ConfidenceHeadConfig(ratio=4, hidden=3)
    inputs = {"x": rng.normal(size=(2, 16, 2, 2))}
    c_in = 2
    for i, k in enumerate(cfg.kernel_sizes):
        c_out = 1 if i == len(cfg.kernel_sizes) - 1 else cfg.hidden
        inputs[f"h.conv{i}.w"] = rng.normal(0.0, 0.6, size=(c_out, c_in, k))
        inputs[f"h.conv{i}.b"] = rng.normal(0.0, 0.1, size=(c_out,))
        c_in = c_out

    def fn(t):
        return confidence_head(t["x"], t, cfg, "h")
    return inputs, fn


def _compute_grid(rng):
    def fn(t):
        spec = compute_grid(t["p"], 16)
        return spec.s
    return {"p": _probs(rng, (4,))}, fn


def _grid_sample(rng):
    T = 12
    s = np.sort(rng.uniform(0.0, T - 1, size=4))
    # stay clear of integer positions, where the interpolation weight has a kink
    s = np.where(np.abs(s - np.rint(s)) < 0.05, s + 0.1, s)
    return {"x": rng.normal(size=(2, T, 2, 2)), "s": np.clip(s, 0.0, T - 1.0 - 1e-3)}, lambda t: grid_sample(t["x"], t["s"])


def _grid_unpool(rng):
    T, J, K = 16, 4, 3

    def fn(t):
        spec = compute_grid(t["p"], T)
        return grid_unpool(t["y"], spec, 20)
    return {"y": rng.normal(size=(K, J)), "p": _probs(rng, (J,))}, fn


def _attention_mask(rng):
    c, hid = 3, 4
    inputs = {
        "x": rng.normal(size=(c, 6, 2, 2)),
        "m.w1": rng.normal(0.0, 0.7, size=(hid, c)),
        "m.b1": rng.normal(0.0, 0.1, size=(hid,)),
        "m.w2": rng.normal(0.0, 0.7, size=(c, hid)),
        "m.b2": rng.normal(0.0, 0.1, size=(c,)),
    }
    return inputs, lambda t: fz.attention_mask(t["x"], t, "m")


def _calibrate(rng):
    tp = 12
    bank = fz.gaussian_bank(np.sort(rng.uniform(0, tp - 1, size=4)), tp)
    return {"x": rng.normal(size=(3, tp, 2, 2))}, lambda t: fz.calibrate(t["x"], bank)


def _scale_shift(rng):
    mode = ("C", "CHW", "CTHW")[int(rng.integers(0, 3))]
    site = fz.FusionSiteConfig(site="res3", levels=("res2", "res3"), reduce=mode, channels=2)
    inputs = {
        "x": rng.normal(size=(5, 4, 2, 2)),
        "f.A.w": rng.normal(0.0, 0.5, size=(2, 5)),
        "f.A.b": rng.normal(0.0, 0.1, size=(2,)),
        "f.B.w": rng.normal(0.0, 0.5, size=(2, 5)),
        "f.B.b": rng.normal(0.0, 0.1, size=(2,)),
    }

    def fn(t):
        a, b = fz.scale_shift(t["x"], site, t, "f")
        # both outputs enter the scalar
        return reduce(a, None, "sum") * 0.7 + reduce(b, None, "sum") * 0.3 + reduce(mul(a, b), None, "sum")
    return inputs, fn


def _fuse(rng):
    shape = (2, 4, 2, 2)
    inputs = {"x": rng.normal(size=shape), "a": rng.uniform(0.05, 0.95, size=(2, 1, 1, 1)), "b": rng.normal(size=shape)}
    return inputs, lambda t: fz.fuse(t["x"], t["a"], t["b"])


def _detection_loss(rng):
    labels = (rng.random((3, 10)) < 0.3).astype(np.float64)
    return {"logits": rng.normal(0.0, 2.0, size=(3, 10))}, lambda t: detection_loss(t["logits"], labels)


OPERATORS: dict[str, Case] = {
    "confidence_head": _confidence_head,
    "compute_grid": _compute_grid,
    "grid_sample": _grid_sample,
    "grid_unpool": _grid_unpool,
    "attention_mask": _attention_mask,
    "calibrate": _calibrate,
    "scale_shift": _scale_shift,
    "fuse": _fuse,
    "detection_loss": _detection_loss,
}


def check_case(case: Case, seed: int, h: float = STEP) -> tuple[float, str]:
    """Worst relative error over the inputs of one seeded instance, and the input it occurs at."""
    rng = np.random.default_rng(seed)
    inputs, fn = case(rng)
    out0 = fn({k: Tensor(v) for k, v in inputs.items()})
    proj = rng.normal(size=out0.shape)

    def scalar(tensors):
        out = fn(tensors)
        return reduce(mul(out, Tensor(proj)), None, "sum")

    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    backward(scalar(leaves))
    worst, where = 0.0, ""
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(inputs[name])

        def f(t, name=name):
            return scalar({**{k: Tensor(v) for k, v in inputs.items()}, name: t})
        numeric = finite_diff_grad(f, Tensor(inputs[name]), h)
        err = max_rel_error(analytic, numeric)
        if not np.isfinite(err) or err > worst:
            worst, where = err, name
    return worst, where


def run(names: Optional[Iterable[str]] = None, seeds: int = 10, base_seed: int = 0,
        extra: Optional[Mapping[str, Case]] = None) -> list[CheckResult]:
    cases = dict(OPERATORS)
    if extra:
        cases.update(extra)
    selected = list(cases) if names is None else list(names)
    unknown = [n for n in selected if n not in cases]
    if unknown:
        raise KeyError(f"unknown operators {unknown}; known: {sorted(cases)}")
    results = []
    for name in selected:
        t0 = time.perf_counter()
        worst, worst_seed, worst_input = 0.0, base_seed, ""
        for seed in range(base_seed, base_seed + seeds):
            err, where = check_case(cases[name], seed)
            if not np.isfinite(err) or err > worst:
                worst, worst_seed, worst_input = err, seed, where
        results.append(CheckResult(name, worst, seeds, worst_seed, worst_input, time.perf_counter() - t0))
    return results


def report(results: Iterable[CheckResult]) -> str:
    lines = ["operator,max_rel_err,seeds,worst_seed,worst_input,status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name},{r.max_rel_err:.3e},{r.seeds},{r.worst_seed},{r.worst_input},{status}")
    return "\n".join(lines) + "\n"
