import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from coarsefine.autodiff import Parameter
from coarsefine.backbone import Model, NetworkConfig, build
from coarsefine.dataio import SynthSpec, generate
from coarsefine.train import SGD, NonFiniteLoss, OptimConfig, fit, lr_at, make_batch, overfit, train_step

NET = NetworkConfig(in_channels=3, channels=(4, 4, 4, 4), spatial=8, stage_spatial_strides=(1, 2, 2, 1),
                    head_channels=4, fc_channels=4, num_classes=2, T=16, T_prime=32, grid_hidden=2)
DATA = SynthSpec(num_clips=8, num_classes=2, T_raw=32, channels=3, spatial=8, bursts=(1, 2), duration=(4, 6))


def _model_with(params):
    return Model(NET, {n: Parameter(n, v) for n, v in params.items()})


class TestSGD:
    def test_momentum_decay_clip_and_multipliers(self):
        cfg = OptimConfig(lr=0.1, momentum=0.9, weight_decay=0.01, clip_norm=1.0, fusion_lr_mult=10.0,
                          grid_lr_mult=2.0)
        m = _model_with({"coarse.x": np.array([1.0]), "fusion.res2.A.w": np.array([2.0]),
                         "coarse.gridhead.conv0.w": np.array([3.0])})
        opt = SGD(m, cfg)
        v = {n: p.values.copy() for n, p in m.params.items()}
        buf = {n: 0.0 for n in v}
        mult = {"coarse.x": 1.0, "fusion.res2.A.w": 10.0, "coarse.gridhead.conv0.w": 2.0}
        for step, grads in enumerate([(3.0, 4.0, 0.0), (0.1, -0.2, 0.3)]):
            for p, g in zip(m.params.values(), grads):
                p.grad = np.array([g])
            norm = np.sqrt(sum(g * g for g in grads))
            scale = min(1.0, 1.0 / norm)
            opt.step(0.1)
            for (n, p), g in zip(m.params.items(), grads):
                d = g * scale + 0.01 * v[n]
                buf[n] = d if step == 0 else 0.9 * buf[n] + d
                v[n] = v[n] - 0.1 * mult[n] * buf[n]
                assert_allclose(p.values, v[n], rtol=1e-14)

    def test_step_rebinds_instead_of_mutating(self):
        m = _model_with({"coarse.x": np.array([1.0])})
        old = m["coarse.x"].values
        m["coarse.x"].grad = np.array([1.0])
        SGD(m, OptimConfig()).step(0.1)
        assert old[0] == 1.0 and m["coarse.x"].values is not old

    def test_schedule(self):
        cfg = OptimConfig(lr=1.0, milestones=(2, 4), gamma=0.1, warmup_steps=4)
        assert lr_at(cfg, 0, 0) == 0.25
        assert lr_at(cfg, 0, 10) == 1.0
        assert_allclose([lr_at(cfg, e, 100) for e in (1, 2, 3, 4)], [1.0, 0.1, 0.1, 0.01])


class TestLoop:
    def test_batch_labels_follow_offsets(self):
        clips = generate(DATA)[:3]
        m = build(dataclasses.replace(NET, input_stride=2))
        feats, offs, labels = make_batch(clips, m, np.random.default_rng(0))
        assert feats.shape == (3, 3, 16, 8, 8) and labels.shape == (3, 2, 32)
        assert_array_equal(offs, 0)
        m = build(NET)
        feats, offs, labels = make_batch(clips, m, np.random.default_rng(0))
        for c, o, y in zip(clips, offs, labels):
            assert_array_equal(y, c.labels[:, o:o + 16])

    def test_fit_is_deterministic_and_numbers_epochs(self):
        clips = generate(DATA)
        runs = []
        for _ in range(2):
            m = build(NET)
            h = fit(m, clips[:6], clips[6:], OptimConfig(lr=0.05), 2, 3, seed=1, start_epoch=5)
            runs.append((h, m.state()))
        assert [r.epoch for r in runs[0][0]] == [5, 6]
        assert [(r.train_loss, r.val_map) for r in runs[0][0]] == [(r.train_loss, r.val_map) for r in runs[1][0]]
        for n, v in runs[0][1].items():
            assert v.tobytes() == runs[1][1][n].tobytes()

    def test_overfit_stops_at_target(self):
        m = build(NET)
        losses = overfit(m, generate(DATA)[:2], OptimConfig(lr=0.05), 200, seed=0, target=0.6)
        assert losses[-1] < 0.6 and len(losses) < 200

    def test_saturated_grid_is_a_numerical_failure(self):
        m = build(NET)
        m["coarse.gridhead.conv2.b"].values = np.array([1e6])
        clips = generate(DATA)[:2]
        feats, offs, labels = make_batch(clips, m, np.random.default_rng(0))
        with pytest.raises(NonFiniteLoss) as info:
            train_step(m, SGD(m, OptimConfig()), feats, offs, labels, 0.1, step=7)
        assert info.value.step == 7 and info.value.grid.shape == (2, 4)

    def test_nan_loss_is_a_numerical_failure(self):
        m = build(dataclasses.replace(NET, pooling="stride"))
        m["coarse.head.fc2.b"].values = np.array([np.nan, 0.0])
        clips = generate(DATA)[:2]
        feats, offs, labels = make_batch(clips, m, np.random.default_rng(0))
        with pytest.raises(NonFiniteLoss):
            train_step(m, SGD(m, OptimConfig()), feats, offs, labels, 0.1)
