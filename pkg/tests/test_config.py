import pytest

from sprd.config import Config, micro_config


class TestConfig:
    def test_defaults(self):
        cfg = Config()
        assert cfg.num_classes == 3 and cfg.num_anchors == 9 and cfg.fused_width == 64 + 3 * 32
        assert (cfg.pos_iou, cfg.neg_iou, cfg.mask_iou_thresh, cfg.mask_cap, cfg.topk) == (0.5, 0.4, 0.7, 300, 100)

    def test_text_round_trip(self):
        cfg = Config(fusion="consecutive", shortcut=False, anchor_scales=(1.0, 1.5), widths=(8, 16, 24))
        assert Config.from_text(cfg.to_text()) == cfg
        assert Config.from_text(cfg.to_text()).to_text() == cfg.to_text()

    def test_file_round_trip(self, tmp_path):
        cfg = micro_config(lr=3e-4)
        cfg.save(tmp_path / "c.cfg")
        assert Config.load(tmp_path / "c.cfg") == cfg

    def test_partial_text_and_comments(self):
        cfg = Config.from_text("# toy run\npyramid = fpn\nshortcut = off  # ablation\n\n")
        assert cfg.pyramid == "fpn" and cfg.shortcut is False and cfg.lr == Config().lr

    @pytest.mark.parametrize("text, msg", [("nonsense = 1", "unknown key"), ("pyramid fpn", "line 1"),
                                           ("shortcut = maybe", "boolean"), ("pyramid = bifpn", "pyramid")])
    def test_rejects(self, text, msg):
        with pytest.raises(ValueError, match=msg):
            Config.from_text(text)

    @pytest.mark.parametrize("kw", [dict(precision="float16"), dict(fusion="C33"), dict(mask_iou_thresh=1.0),
                                    dict(neg_iou=0.6), dict(batch_size=0), dict(strides=(4, 8))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Config(**kw)

    def test_every_field_serialized(self):
        text = Config().to_text()
        assert all(f"{name} = " in text for name in Config.__dataclass_fields__)
