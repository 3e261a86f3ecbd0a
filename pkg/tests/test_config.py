import pytest

from coarsefine import config as cf
from coarsefine.backbone import ConfigError


class TestParsing:
    def test_text_with_comments(self):
        cfg = cf.loads("""
            # toy run
            seed = 3
            net.pooling = stride   # fixed pooling
            net.channels = 4,4,8,8
            optim.milestones = 10,20
            net.fusion_mask = false
            data.carrier = 0.1, 0.2
        """)
        assert cfg.seed == 3
        assert cfg.net.pooling == "stride"
        assert cfg.net.channels == (4, 4, 8, 8)
        assert cfg.optim.milestones == (10, 20)
        assert cfg.net.fusion_mask is False
        assert cfg.data.carrier == (0.1, 0.2)

    def test_empty_tuple(self):
        assert cf.loads("optim.milestones =").optim.milestones == ()

    @pytest.mark.parametrize("text", [
        "net.pooling", "= 3", "bogus = 1", "net.bogus = 1", "net.in_channels = 3", "data.first_index = 2",
        "net.T = x", "optim.lr = fast", "net.fusion_mask = maybe", "data.bursts = 1", "eval.mode = every",
        "net.pooling = median", "train.batch_size = 0", "optim.lr = 0", "net.input_stride = 3",
        "net.T = 64\nnet.T_prime = 64\nnet.input_stride = 2", "train.batch_size = 1000",
    ])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            cf.loads(text)

    def test_error_names_the_line(self):
        with pytest.raises(ConfigError, match=":2:"):
            cf.loads("seed = 1\nnot a line\n")

    def test_dump_round_trip(self):
        cfg = cf.load(preset="table3e-t32-a8", overrides={"seed": 9, "optim.milestones": "3,4"})
        assert cf.loads(cfg.dumps()) == cfg

    def test_order_defaults_preset_file_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("net.pooling = max\ntrain.epochs = 3\n")
        cfg = cf.load(path, "table3d-stride", {"train.epochs": "5"})
        assert cfg.net.pooling == "max" and cfg.train.epochs == 5 and cfg.net.two_stream is False

    def test_missing_file_and_unknown_preset(self, tmp_path):
        with pytest.raises(ConfigError):
            cf.load(tmp_path / "none.cfg")
        with pytest.raises(ConfigError):
            cf.load(preset="table9")


class TestDerived:
    @pytest.mark.parametrize("name", sorted(cf.PRESETS))
    def test_every_preset_builds_a_network(self, name):
        cfg = cf.load(preset=name)
        net = cfg.network()
        assert net.in_channels == cfg.data.channels and net.num_classes == cfg.data.num_classes

    def test_splits_are_disjoint(self):
        cfg = cf.load()
        tr, va = cfg.train_spec(), cfg.val_spec()
        assert va.first_index == tr.first_index + tr.num_clips
        assert va.num_clips == cfg.train.val_clips and va.prefix != tr.prefix

    def test_seed_reaches_the_network(self):
        assert cf.load(overrides={"seed": 4}).network().seed == 4

    def test_routing_of_ablation_presets(self):
        assert cf.load(preset="table3d-stride").net.pooling == "stride"
        assert cf.load(preset="table3c-none").net.fusion_mask is False
        assert cf.load(preset="table3b-C").net.fusion_reduce == "C"
        assert cf.load(preset="table3a-late").net.fusion == "late-only"
        assert cf.load(preset="slowfast-det").net.fusion == "slowfast_det"
        long = cf.load(preset="long-schedule")
        assert long.optim.lr == 0.02 and long.optim.milestones == (60, 80) and long.train.epochs == 100
