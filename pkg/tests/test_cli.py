import json
import subprocess
import sys

import pytest

from sprd.cli import main
from sprd.config import micro_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """synth -> train -> infer on a tiny micro-config run."""
    d = tmp_path_factory.mktemp("cli")
    cfg = micro_config(num_classes=3, prior=0.3)  # high prior so an untrained model clears the score floor
    cfg.save(d / "run.cfg")
    assert main(["synth", "--seed", "3", "--count", "4", "--image-size", "32", "--out", str(d / "data")]) == 0
    assert main(["train", "--data", str(d / "data"), "--config", str(d / "run.cfg"), "--steps", "3",
                 "--out-ckpt", str(d / "m.ckpt"), "--log", str(d / "metrics.csv")]) == 0
    assert main(["infer", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data"), "--out-json", str(d / "pred.json")]) == 0
    return d


class TestWorkflow:
    def test_synth_layout(self, workdir):
        ann = json.loads((workdir / "data/annotations.json").read_text())
        assert len(ann["images"]) == 4 and (workdir / "data/images/000000.ppm").exists()

    def test_metrics_csv(self, workdir):
        lines = (workdir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,L_cls,L_reg,L_mask,total,grad_norm" and len(lines) == 4

    def test_predictions(self, workdir):
        preds = json.loads((workdir / "pred.json").read_text())
        assert preds and set(preds[0]) == {"image_id", "class", "score", "box", "mask_rle"}

    def test_eval(self, workdir, capsys):
        out = workdir / "eval.json"
        assert main(["eval", "--pred-json", str(workdir / "pred.json"), "--ann-json",
                     str(workdir / "data/annotations.json"), "--out", str(out), "--pr-csv", str(workdir / "pr.csv")]) == 0
        res = json.loads(out.read_text())
        assert set(res) == {"box", "mask"} and "AP50" in res["box"]
        assert (workdir / "pr.csv").read_text().startswith("kind,class,iou,recall,precision")

    def test_eval_to_stdout(self, workdir, capsys):
        assert main(["eval", "--pred-json", str(workdir / "pred.json"), "--ann-json",
                     str(workdir / "data/annotations.json")]) == 0
        assert "AP50" in capsys.readouterr().out

    def test_ablation_flags_change_digest(self, workdir):
        assert main(["train", "--data", str(workdir / "data"), "--config", str(workdir / "run.cfg"), "--steps", "1",
                     "--pyramid", "fpn", "--shortcut", "off", "--fusion", "consecutive", "--mask-iou-thresh", "0.5",
                     "--out-ckpt", str(workdir / "abl.ckpt"), "--log", str(workdir / "abl.csv")]) == 0
        from sprd.checkpoint import read_checkpoint
        from sprd.config import Config
        cfg = Config.from_text(read_checkpoint(workdir / "abl.ckpt").config_text)
        assert (cfg.pyramid, cfg.shortcut, cfg.fusion, cfg.mask_iou_thresh) == ("fpn", False, "consecutive", 0.5)

    def test_digest_mismatch_refused_then_forced(self, workdir, capsys):
        other = micro_config(num_classes=3, prior=0.05)
        other.save(workdir / "other.cfg")
        args = ["infer", "--ckpt", str(workdir / "m.ckpt"), "--data", str(workdir / "data"),
                "--out-json", str(workdir / "p2.json"), "--config", str(workdir / "other.cfg")]
        assert main(args) == 1
        assert "digest" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0


class TestErrors:
    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["synth", "--count", "1", "--out", "x", "--bogus"])
        assert e.value.code == 2 and "usage" in capsys.readouterr().err

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "bad.ckpt").write_bytes(b"NOPE")
        assert main(["infer", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", str(tmp_path),
                     "--out-json", str(tmp_path / "o.json")]) == 1
        assert "magic" in capsys.readouterr().err

    def test_missing_data(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope"), "--steps", "1"]) == 1
        assert "error" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_single_op(self, capsys):
        assert main(["gradcheck", "--ops", "conv2d,sigmoid", "--trials", "3"]) == 0
        out = capsys.readouterr().out
        assert "PASS conv2d" in out and "PASS sigmoid" in out

    def test_unknown_op(self, capsys):
        assert main(["gradcheck", "--ops", "warp_drive", "--trials", "1"]) == 1

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "sprd", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and all(c in r.stdout for c in ("synth", "train", "infer", "eval", "gradcheck"))
