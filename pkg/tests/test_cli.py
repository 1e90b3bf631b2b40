import json
import shutil
from unittest.mock import patch

import numpy as np
import pytest

from odcs.cli import EXIT_FAILURE, EXIT_USAGE, build_parser, main
from odcs.config import dump_config
from odcs.raster import read_image, read_mask


def exit_code(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


class TestParser:

    def test_version(self, capsys):
        assert exit_code(["--version"]) == 0
        assert "odcs" in capsys.readouterr().out

    def test_subcommand_required(self):
        assert exit_code([]) == 2

    def test_verbosity_flags_exclusive(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["-v", "-q", "synth", "--out", "x"])

    def test_unexpected_error_is_one_line(self, tmp_path, capsys):
        with patch("odcs.cli.cmd_synth", side_effect=RuntimeError("resize failed\nat row 3")):
            code = exit_code(["synth", "--out", str(tmp_path)])
        assert code == EXIT_FAILURE
        err = capsys.readouterr().err
        assert err.strip() == "error: internal: RuntimeError: resize failed at row 3"
        assert "Traceback" not in err

    def test_unexpected_error_without_message(self, tmp_path, capsys):
        with patch("odcs.cli.cmd_synth", side_effect=ValueError()):
            assert exit_code(["synth", "--out", str(tmp_path)]) == EXIT_FAILURE
        assert capsys.readouterr().err.strip() == "error: internal: ValueError: ValueError"

    def test_json_flag_after_subcommand(self):
        args = build_parser().parse_args(["eval", "--ckpt", "a", "--manifest", "b", "--json"])
        assert args.json
        assert args.command == "eval"


class TestSynth:

    def test_writes_dataset(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "a"), "--count", "2", "--size", "32",
                     "--seed", "5", "--json"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["count"] == 2
        assert result["cup_enclosed"] == 2
        for name in ("sample_0000.ppm", "sample_0001_mask.pgm", "manifest.txt"):
            assert (tmp_path / "a" / name).is_file()

    def test_same_seed_same_bytes(self, tmp_path):
        for out in ("a", "b"):
            main(["-q", "synth", "--out", str(tmp_path / out), "--count", "2", "--size", "32", "--seed", "5"])
        for name in ("sample_0000.ppm", "sample_0001.ppm", "sample_0001_mask.pgm", "manifest.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_human_output(self, tmp_path, capsys):
        main(["synth", "--out", str(tmp_path), "--count", "1", "--size", "32"])
        assert "Manifest:" in capsys.readouterr().out


class TestTrain:

    def test_train_and_resume(self, synthetic_data, tmp_path, make_config, capsys):
        manifest, _ = synthetic_data
        cfg = tmp_path / "train.cfg"
        cfg.write_text(dump_config(make_config(manifest, tmp_path / "ckpt", max_steps=1)))
        assert main(["-q", "train", "--config", str(cfg), "--json"]) == 0
        first = json.loads(capsys.readouterr().out)
        assert first["steps"] == 1

        cfg.write_text(dump_config(make_config(manifest, tmp_path / "ckpt", max_steps=3)))
        main(["-q", "train", "--config", str(cfg), "--resume", str(tmp_path / "ckpt" / "latest.odcs"), "--json"])
        second = json.loads(capsys.readouterr().out)
        assert second["steps"] == 3
        assert np.isfinite(second["l_total"])

    def test_bad_config_exits_with_usage_status(self, tmp_path, capsys):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("learning_rate = 0.1\n")
        assert exit_code(["train", "--config", str(cfg)]) == EXIT_USAGE
        err = capsys.readouterr().err
        assert err.startswith("error: config:")
        assert len(err.strip().splitlines()) == 1

    def test_missing_config(self, tmp_path):
        assert exit_code(["train", "--config", str(tmp_path / "absent.cfg")]) == EXIT_USAGE

    def test_bad_thread_count(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("ODCS_THREADS", "0")
        assert exit_code(["synth", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "ODCS_THREADS" in capsys.readouterr().err


class TestEval:

    def test_json_and_csv(self, trained_run, tmp_path, capsys):
        csv_path = tmp_path / "rows.csv"
        assert main(["eval", "--ckpt", str(trained_run["checkpoint"]),
                     "--manifest", str(trained_run["manifest"]), "--csv", str(csv_path), "--json"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["images"] == 4
        assert 0.0 <= report["dice_disc"] <= 1.0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "id,dice_cup,dice_disc,cdr_pred,cdr_true"
        assert len(lines) == 5

    def test_human_report(self, trained_run, capsys):
        main(["eval", "--ckpt", str(trained_run["checkpoint"]), "--manifest", str(trained_run["manifest"])])
        out = capsys.readouterr().out
        assert "Dice (cup)" in out
        assert "sample_0003" in out

    def test_missing_checkpoint(self, trained_run, tmp_path, capsys):
        code = exit_code(["eval", "--ckpt", str(tmp_path / "absent.odcs"),
                          "--manifest", str(trained_run["manifest"])])
        assert code == EXIT_FAILURE
        assert capsys.readouterr().err.startswith("error: checkpoint:")

    def test_corrupt_checkpoint(self, trained_run, tmp_path, capsys):
        bad = tmp_path / "bad.odcs"
        bad.write_bytes(b"ODCS\x63\x00")
        code = exit_code(["eval", "--ckpt", str(bad), "--manifest", str(trained_run["manifest"])])
        assert code == EXIT_FAILURE
        assert "version" in capsys.readouterr().err


class TestPredict:

    def copy_image(self, trained_run, tmp_path):
        image = tmp_path / "eye.ppm"
        shutil.copyfile(trained_run["root"] / "data" / "sample_0000.ppm", image)
        return image

    def test_default_output_and_overlay(self, trained_run, tmp_path, capsys):
        image = self.copy_image(trained_run, tmp_path)
        overlay = tmp_path / "eye_overlay.ppm"
        assert main(["predict", "--ckpt", str(trained_run["checkpoint"]), "--image", str(image),
                     "--overlay", str(overlay), "--json"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["mask"] == str(tmp_path / "eye_pred.pgm")
        mask = read_mask(tmp_path / "eye_pred.pgm")
        assert mask.shape == (32, 32)
        assert set(np.unique(mask.labels)) <= {0, 1, 2}
        assert read_image(overlay).pixels.shape == (32, 32, 3)

    def test_roi_bypasses_detection(self, trained_run, tmp_path, capsys):
        image = self.copy_image(trained_run, tmp_path)
        with patch("odcs.trainer.detect_roi") as detect:
            main(["predict", "--ckpt", str(trained_run["checkpoint"]), "--image", str(image),
                  "--roi", "2,2,28,28", "--out", str(tmp_path / "m.pgm"), "--json"])
        detect.assert_not_called()
        assert json.loads(capsys.readouterr().out)["roi"] == "2,2,28,28"

    def test_bad_roi(self, trained_run, tmp_path, capsys):
        image = self.copy_image(trained_run, tmp_path)
        code = exit_code(["predict", "--ckpt", str(trained_run["checkpoint"]), "--image", str(image),
                          "--roi", "1,2,3"])
        assert code == EXIT_FAILURE
        assert capsys.readouterr().err.startswith("error: roi:")

    def test_missing_image(self, trained_run, tmp_path, capsys):
        code = exit_code(["predict", "--ckpt", str(trained_run["checkpoint"]),
                          "--image", str(tmp_path / "absent.ppm")])
        assert code == EXIT_FAILURE
        assert capsys.readouterr().err.startswith("error: io:")
