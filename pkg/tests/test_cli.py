"""CLI contract: subcommands, exit codes, file outputs."""

import json

import numpy as np
import pytest
from PIL import Image

from mattekit import imageops as io
from mattekit import training as tr
from mattekit.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus plus a total=0 checkpoint, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert main(["synth", "--out", str(corpus), "--count", "6",
                 "--seed", "3", "--size", "64"]) == 0
    run_dir = root / "run"
    cfg = tr.TrainConfig.desk_preset(dataset_dir=str(corpus),
                                     out_dir=str(run_dir))
    cfg = tr.TrainConfig.from_dict({**cfg.to_dict(), "total": 0, "warmup": 0})
    cfg_path = root / "train0.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return {"root": root, "corpus": corpus,
            "checkpoint": run_dir / "ckpt_final.mam"}


class TestSynth:
    def test_writes_layout(self, workspace):
        corpus = workspace["corpus"]
        manifest = json.loads((corpus / "manifest.json").read_text())
        assert len(manifest["train"]) + len(manifest["eval"]) == 6
        for sub in ("fg", "alpha", "bg"):
            assert len(list((corpus / sub).glob("*.png"))) == 6

    def test_env_var_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MAM_DATA_DIR", str(tmp_path))
        assert main(["synth", "--count", "2", "--seed", "0",
                     "--size", "32"]) == 0
        assert (tmp_path / "corpus" / "manifest.json").exists()


class TestTrain:
    def test_total_zero_writes_checkpoint(self, workspace):
        assert workspace["checkpoint"].exists()

    def test_short_run(self, workspace, tmp_path):
        cfg = tr.TrainConfig.desk_preset(dataset_dir=str(workspace["corpus"]),
                                         out_dir=str(tmp_path))
        cfg = tr.TrainConfig.from_dict({**cfg.to_dict(), "total": 3,
                                        "warmup": 1, "batch_size": 2,
                                        "checkpoint_every": 0})
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg.to_dict()))
        assert main(["train", "--config", str(cfg_path)]) == 0
        log = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(log) == 3


class TestEval:
    def test_writes_report_with_items(self, workspace, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(["eval", "--dataset", str(workspace["corpus"]),
                     "--checkpoint", str(workspace["checkpoint"]),
                     "--prompt", "box", "--policy", "os8",
                     "--target", "64", "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert len(report["items"]) == 1   # 6 items -> 1 eval
        assert "aggregate" in report
        shown = capsys.readouterr().out
        assert "mse_all" in shown

    def test_two_item_split_counts(self, workspace, tmp_path):
        # train split of the 6-item corpus has 5 items
        out = tmp_path / "train_report.json"
        code = main(["eval", "--dataset", str(workspace["corpus"]),
                     "--checkpoint", str(workspace["checkpoint"]),
                     "--target", "64", "--split", "train", "--out", str(out)])
        assert code == 0
        assert len(json.loads(out.read_text())["items"]) == 5


class TestMatte:
    def test_box_prompt_writes_png(self, workspace, tmp_path):
        corpus = workspace["corpus"]
        manifest = json.loads((corpus / "manifest.json").read_text())
        name = manifest["eval"][0]
        alpha = io.read_alpha(corpus / "alpha" / f"{name}.png")
        fg = io.read_image(corpus / "fg" / f"{name}.png")
        bg = io.read_image(corpus / "bg" / f"{name}.png")
        image_path = tmp_path / "scene.png"
        io.write_image(image_path, io.composite(fg, bg, alpha))
        box = io.Box.tight_around(alpha)
        out = tmp_path / "matte.png"
        code = main(["matte", "--image", str(image_path),
                     "--checkpoint", str(workspace["checkpoint"]),
                     "--box", f"{box.x0},{box.y0},{box.x1},{box.y1}",
                     "--alpha", str(corpus / "alpha" / f"{name}.png"),
                     "--out", str(out), "--target", "64"])
        assert code == 0
        with Image.open(out) as im:
            arr = np.asarray(im)
        assert arr.dtype == np.uint8          # 8-bit by default
        assert arr.min() >= 0 and arr.max() <= 255
        assert arr.shape == (64, 64)

    def test_composite_output(self, workspace, tmp_path):
        image_path = tmp_path / "scene.png"
        rng = np.random.default_rng(0)
        io.write_image(image_path, io.ImageRGB(rng.random((3, 64, 64),
                                                          dtype=np.float32)))
        bg_path = tmp_path / "bg.png"
        io.write_image(bg_path, io.ImageRGB(np.ones((3, 64, 64), np.float32)))
        out = tmp_path / "m.png"
        comp = tmp_path / "c.png"
        code = main(["matte", "--image", str(image_path),
                     "--checkpoint", str(workspace["checkpoint"]),
                     "--point", "32,32", "--out", str(out),
                     "--composite", str(bg_path), "--composite-out", str(comp),
                     "--target", "64"])
        assert code == 0
        assert comp.exists()

    def test_requires_exactly_one_prompt(self, workspace, tmp_path, capsys):
        code = main(["matte", "--image", "x.png",
                     "--checkpoint", str(workspace["checkpoint"]),
                     "--out", str(tmp_path / "m.png")])
        assert code == 1
        assert "exactly one" in capsys.readouterr().err


class TestInspect:
    def test_reports_split_counts(self, workspace, capsys):
        assert main(["inspect-checkpoint", str(workspace["checkpoint"])]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["trainable_m2m"] > 0
        assert info["trainable_encoder"] > 0
        assert info["config"]["m2m"]["widths"] == [16, 8, 8]


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["synth", "--nope"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        code = main(["inspect-checkpoint", str(tmp_path / "missing.mam")])
        assert code == 2

    def test_bad_checkpoint_is_runtime_error(self, tmp_path):
        bad = tmp_path / "bad.mam"
        bad.write_bytes(b"junk")
        assert main(["inspect-checkpoint", str(bad)]) == 2

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
