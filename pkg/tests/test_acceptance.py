"""Acceptance checks; each test records one pass/fail line shown in the terminal summary.

The training-based checks (6, 7, 8, 9) run real training on the synthetic
task and take most of the suite's time.
"""

import csv
import dataclasses
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from coarsefine import cli
from coarsefine import config as cf
from coarsefine import dataio as io_
from coarsefine import gradcheck as gc
from coarsefine.autodiff import Tensor
from coarsefine.backbone import build
from coarsefine.gridpool import ConfidenceHeadConfig, compute_grid, fixed_pool, grid_pool, grid_unpool, \
    inverse_grid_map
from coarsefine.losseval import average_precision
from coarsefine.train import fit

from conftest import ACCEPTANCE_LINES

SEEDS = (0, 1, 2, 3, 4)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


_DATA: dict = {}


def train_final_map(preset: str, seed: int, **overrides) -> float:
    """Validation mAP after the configured number of epochs; datasets are shared across runs."""
    cfg = cf.load(preset=preset, overrides={**overrides, "seed": seed})
    key = (cfg.train_spec(), cfg.val_spec())
    if key not in _DATA:
        _DATA[key] = (io_.generate(key[0]), io_.generate(key[1]))
    train, val = _DATA[key]
    history = fit(build(cfg.network()), train, val, cfg.optim, cfg.train.epochs, cfg.train.batch_size, cfg.seed)
    return history[-1].val_map


def _mp_grid(p, T):
    with mpmath.workdps(50):
        w = [1 - mpmath.mpf(float(v)) for v in p]
        total = mpmath.fsum(w)
        acc, out = mpmath.mpf(0), []
        for v in w:
            acc += v
            out.append(float(T * acc / total))
    return np.array(out)


def _brute_ap(scores, labels):
    n = len(scores)
    pos = [i for i in range(n) if labels[i]]
    if not pos:
        return None
    total = 0.0
    for i in pos:
        ahead = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)]
        total += sum(1 for j in ahead if labels[j]) / len(ahead)
    return total / len(pos)


def _metrics(path: Path) -> list[dict]:
    lines = path.read_text().splitlines()
    return list(csv.DictReader(lines[1:]))


def test_criterion_01_gradient_fidelity():
    t0 = time.process_time()
    results = gc.run(seeds=10)
    cpu = time.process_time() - t0
    worst = max(results, key=lambda r: r.max_rel_err)
    names = {r.name for r in results}
    required = {"confidence_head", "compute_grid", "grid_sample", "grid_unpool", "attention_mask", "calibrate",
                "scale_shift", "fuse", "detection_loss"}
    ok = required <= names and all(r.passed and r.seeds >= 10 for r in results) and cpu < 60.0
    record(1, ok, f"{len(results)} operators x 10 seeds, worst {worst.name} {worst.max_rel_err:.2e} "
                  f"(< 1e-4), {cpu:.1f} s CPU (< 60 s)")


def test_criterion_02_cumulative_grid_exactness():
    rng = np.random.default_rng(2)
    worst, monotone, ends = 0.0, True, 0.0
    for _ in range(100):
        ratio = int(rng.choice([1, 2, 4, 8]))
        J = int(rng.integers(1, 64 // ratio + 1))
        T = J * ratio
        p = rng.uniform(1e-6, 1 - 1e-6, size=J)
        q = compute_grid(p, T).q.values
        worst = max(worst, float(np.max(np.abs(q - _mp_grid(p, T)))))
        monotone &= bool(np.all(np.diff(q) > 0))
        ends = max(ends, abs(q[-1] - T))
    record(2, worst <= 1e-12 and monotone and ends <= 1e-12,
           f"100 vectors, max |q - q_50digit| {worst:.1e}, increasing={monotone}, max |q_end - T| {ends:.1e}")


def test_criterion_03_uniform_grid_equals_striding():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        ratio = int(rng.choice([1, 2, 4, 8]))
        T = ratio * int(rng.integers(1, 9))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), T, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        x = Tensor(rng.normal(size=shape))
        pooled, _ = grid_pool(x, {}, ConfidenceHeadConfig(ratio=ratio), "h", force_uniform=True)
        worst = max(worst, float(np.max(np.abs(pooled.values - fixed_pool(x, "stride", ratio).values))))
    record(3, worst <= 1e-12, f"100 random tensors, max deviation from strided pooling {worst:.1e}")


def test_criterion_04_unpool_inverse():
    rng = np.random.default_rng(4)
    inv_err = 0.0
    for _ in range(100):
        J = int(rng.integers(2, 17))
        q = compute_grid(rng.uniform(0.01, 0.99, size=J), 4 * J).q.values
        knots = (q - 1.0)[None]
        inv_err = max(inv_err, float(np.max(np.abs(inverse_grid_map(knots, knots[0]).values[0] - np.arange(J)))))
    ramp_err = 0.0
    for ratio in (2, 4, 8):
        T = 64
        a, b = rng.normal(size=2)
        x = Tensor((a + b * np.arange(T, dtype=float))[None, :, None, None])
        y, spec = grid_pool(x, {}, ConfidenceHeadConfig(ratio=ratio), "h", force_uniform=True)
        out = grid_unpool(y.values.reshape(1, -1), spec, T).values[0]
        t = np.arange(T)
        inner = t >= ratio - 1
        ramp_err = max(ramp_err, float(np.max(np.abs(out[inner] - (a + b * t[inner])))))
    record(4, inv_err <= 1e-9 and ramp_err <= 1e-9,
           f"max |m^-1(m(j)) - j| {inv_err:.1e}, ramp round trip on interior frames {ramp_err:.1e}")


def test_criterion_05_average_precision_oracle():
    rng = np.random.default_rng(5)
    worst, ties = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        scores = rng.integers(0, int(rng.integers(1, 8)) + 1, size=n).astype(float)
        labels = rng.random(n) < rng.uniform(0.05, 0.9)
        ties += len(np.unique(scores)) < n
        got, ref = average_precision(scores, labels), _brute_ap(scores, labels)
        if ref is None:
            assert got is None
            continue
        worst = max(worst, abs(got - ref))
    record(5, worst <= 1e-12, f"1000 instances ({ties} with tied scores), max |AP - brute force| {worst:.1e}")


@pytest.fixture(scope="module")
def default_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    assert cli.main(["generate", "--out", str(root / "data")]) == 0
    return root


def test_criterion_06_training_smoke(default_data):
    root = default_data
    data = ["--data", str(root / "data")]
    rc = cli.main(["train", "--preset", "coarse-fine", *data, "--out", str(root / "overfit"),
                   "--set", "train.overfit_steps=500", "--set", "train.overfit_target=0.05"])
    losses = [float(r["loss"]) for r in _metrics(root / "overfit" / "overfit.csv")]
    overfit_ok = rc == 0 and len(losses) <= 500 and losses[-1] < 0.05
    t0 = time.perf_counter()
    rc = cli.main(["train", "--preset", "coarse-fine", *data, "--out", str(root / "full")])
    wall = time.perf_counter() - t0
    final = float(_metrics(root / "full" / "metrics.csv")[-1]["val_map"])
    full_ok = rc == 0 and wall <= 600.0 and final >= 0.6
    record(6, overfit_ok and full_ok,
           f"one batch: loss {losses[-1]:.4f} after {len(losses)} steps (< 0.05 within 500); "
           f"full run: val mAP {final:.3f} (>= 0.6) in {wall:.0f} s (<= 600 s)")


def test_criterion_07_pooling_type_ordering():
    maps = {kind: [train_final_map(f"table3d-{kind}", s) for s in SEEDS] for kind in ("grid", "stride", "max", "avg")}
    med = {k: float(np.median(v)) for k, v in maps.items()}
    wins = sum(g > s for g, s in zip(maps["grid"], maps["stride"]))
    ok = med["grid"] > med["stride"] and med["stride"] > med["max"] and med["stride"] > med["avg"] and wins >= 4
    detail = ", ".join(f"{k} {med[k]:.3f}" for k in med)
    record(7, ok, f"median val mAP over 5 seeds: {detail}; grid beats stride on {wins}/5 seeds "
                  f"(needs grid > stride > max, avg and >= 4/5)")


def test_criterion_08_fusion_mask():
    on = [train_final_map("table3c-attention", s) for s in SEEDS]
    off = [train_final_map("table3c-none", s) for s in SEEDS]
    record(8, np.median(on) >= np.median(off),
           f"median val mAP over 5 seeds: mask {np.median(on):.3f} vs no mask {np.median(off):.3f}")


def test_criterion_09_determinism(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path / "data"), "--set", "data.num_clips=32",
                     "--set", "train.val_clips=16"]) == 0
    args = ["--preset", "coarse-fine", "--data", str(tmp_path / "data"), "--threads", "1",
            "--set", "data.num_clips=32", "--set", "train.val_clips=16", "--set", "train.epochs=3", "--seed", "7"]
    for run in ("a", "b"):
        assert cli.main(["train", *args, "--out", str(tmp_path / run)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    diff = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    other = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    record(9, not diff and files == other and any(f.name == "metrics.csv" for f in files),
           f"{len(files)} output files (checkpoint tensors, manifests, metrics CSV) compared, {len(diff)} differ")


def test_criterion_10_format_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    exact = True
    for dtype in ("<f4", "<f8"):
        for shape in ((), (0,), (3,), (2, 3, 4), (1, 2, 1, 3, 2)):
            a = rng.normal(size=shape).astype(dtype)
            b = io_.decode_tensor(io_.encode_tensor(a))
            exact &= a.tobytes() == b.tobytes() and a.shape == b.shape and a.dtype == b.dtype
    cfg = cf.load(preset="coarse-fine").network()
    model = build(cfg)
    for p in model.parameters():
        p.values = rng.normal(size=p.shape)
    io_.save_checkpoint(model, tmp_path / "ck")
    other = build(dataclasses.replace(cfg, seed=99))
    io_.load_checkpoint(other, tmp_path / "ck")
    exact &= all(model[n].values.tobytes() == other[n].values.tobytes() for n in model.names())

    good = io_.encode_tensor(np.arange(6.0))
    cases = {
        "bad magic": (b"NOPE" + good[4:], io_.BadMagic),
        "bad version": (good[:4] + (2).to_bytes(2, "little") + good[6:], io_.BadVersion),
        "bad dtype": (good[:6] + bytes([9]) + good[7:], io_.BadDtype),
        "truncated payload": (good[:-1], io_.Truncated),
        "truncated header": (good[:6], io_.Truncated),
    }
    kinds_ok = True
    for name, (buf, kind) in cases.items():
        try:
            io_.decode_tensor(buf)
            kinds_ok = False
        except kind:
            pass
    mf = tmp_path / "ck" / "manifest.json"
    mf.write_text(mf.read_text().replace('"version": 1', '"version": 2'))
    try:
        io_.load_checkpoint(other, tmp_path / "ck")
        kinds_ok = False
    except io_.CheckpointVersionError:
        pass
    record(10, exact and kinds_ok, f"tensor and checkpoint round trips bit-exact={exact}; "
                                   f"{len(cases) + 1} corruptions raise their error kinds={kinds_ok}")
