"""End-to-end command-line workflow, exercised in a temp workspace."""

import contextlib
import io
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from iacodec import cli, synthetic
from iacodec.bitstream import decode_instance
from iacodec.model import load_checkpoint, save_checkpoint

from conftest import tiny_model


REPORT_RE = re.compile(
    r"^R=[0-9.eE+-]+ bpp \| M=[0-9.eE+-]+ bpp \| PSNR=[0-9.eE+-]+ dB$")
CODED_RE = re.compile(
    r"^coded: latents \d+ bits, update \d+ bits, container \d+ bytes$")


def run_cli(argv):
    out = io.StringIO()
    err = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main(argv)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One finetune/encode/decode/eval run shared by the inspection tests."""
    root = tmp_path_factory.mktemp("cli")
    inst = root / "instance"
    code = synthetic.main([str(inst), "--seed", "5", "--frames", "2",
                           "--size", "32"])
    assert code == 0

    model = tiny_model(seed=7)
    ckpt = root / "model.ckpt"
    save_checkpoint(model, str(ckpt), extra={"beta": 1e-3})

    ft = root / "ft"
    code, ft_out, _ = run_cli([
        "finetune", "--instance", str(inst), "--model", str(ckpt),
        "--beta", "1e-3", "--steps", "4", "--eval-interval", "2",
        "--seed", "0", "--out", str(ft)])
    assert code == 0

    stream = root / "coded.iac"
    code, enc_out, _ = run_cli([
        "encode", "--instance", str(inst), "--model", str(ckpt),
        "--update", str(ft / "update.ckpt"), "--out", str(stream)])
    assert code == 0

    dec = root / "decoded"
    code, dec_out, _ = run_cli([
        "decode", str(stream), "--model", str(ckpt), "--out", str(dec)])
    assert code == 0

    code, eval_out, _ = run_cli([
        "eval", str(stream), "--model", str(ckpt), "--ref", str(inst)])
    assert code == 0

    return {"root": root, "inst": inst, "ckpt": ckpt, "ft": ft,
            "stream": stream, "dec": dec, "ft_out": ft_out,
            "enc_out": enc_out, "dec_out": dec_out, "eval_out": eval_out}


class TestPipeline:
    def test_finetune_writes_update_and_curves(self, workspace):
        assert (workspace["ft"] / "update.ckpt").exists()
        assert (workspace["ft"] / "curves.csv").exists()
        assert workspace["ft_out"].startswith("best step ")
        assert "objective" in workspace["ft_out"]
        assert "bits/px" in workspace["ft_out"]

    def test_encode_prints_report_and_coded_lines(self, workspace):
        lines = workspace["enc_out"].splitlines()
        assert len(lines) == 2
        assert REPORT_RE.match(lines[0])
        assert CODED_RE.match(lines[1])

    def test_coded_container_size_matches_file(self, workspace):
        size = os.path.getsize(workspace["stream"])
        assert f"container {size} bytes" in workspace["enc_out"]

    def test_decode_writes_frames(self, workspace):
        names = sorted(os.listdir(workspace["dec"]))
        assert names == ["frame0000.png", "frame0001.png"]
        assert "decoded 2 frames (32x32)" in workspace["dec_out"]

    def test_eval_repeats_encode_report_verbatim(self, workspace):
        assert workspace["eval_out"] == workspace["enc_out"]

    def test_decoded_stream_matches_finetune_report(self, workspace):
        """The PSNR printed by eval is the one the finetune run promised."""
        m = re.search(r"PSNR ([0-9.]+) dB", workspace["ft_out"])
        ft_psnr = float(m.group(1))
        m = re.search(r"PSNR=([0-9.eE+-]+) dB", workspace["eval_out"])
        eval_psnr = float(m.group(1))
        assert eval_psnr == pytest.approx(ft_psnr, abs=5e-5)

    def test_decode_reproduces_transmitter_frames(self, workspace):
        model, _ = load_checkpoint(str(workspace["ckpt"]))
        blob = open(workspace["stream"], "rb").read()
        first = decode_instance(blob, model)
        second = decode_instance(blob, model)
        for a, b in zip(first.frames, second.frames):
            np.testing.assert_array_equal(a, b)


class TestEncodeWithoutUpdate:
    def test_plain_encode_round_trips(self, tmp_path):
        inst = tmp_path / "inst"
        synthetic.main([str(inst), "--seed", "9", "--frames", "1",
                        "--size", "32"])
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model(seed=3), str(ckpt))
        stream = tmp_path / "s.iac"
        code, out, _ = run_cli(["encode", "--instance", str(inst),
                                "--model", str(ckpt), "--out", str(stream)])
        assert code == 0
        line = out.splitlines()[0]
        assert REPORT_RE.match(line)
        m_bpp = float(re.search(r"M=([0-9.eE+-]+) bpp", line).group(1))
        assert 0.0 < m_bpp < 1.0
        code, _, _ = run_cli(["decode", str(stream), "--model", str(ckpt),
                              "--out", str(tmp_path / "d")])
        assert code == 0

    def test_fps_flags_subsample_before_coding(self, tmp_path):
        inst = tmp_path / "inst"
        synthetic.main([str(inst), "--seed", "2", "--frames", "4",
                        "--size", "32"])
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model(seed=3), str(ckpt))
        stream = tmp_path / "s.iac"
        code, _, _ = run_cli(["encode", "--instance", str(inst),
                              "--model", str(ckpt), "--fps-in", "2",
                              "--fps-out", "1", "--out", str(stream)])
        assert code == 0
        code, out, _ = run_cli(["decode", str(stream), "--model", str(ckpt),
                                "--out", str(tmp_path / "d")])
        assert code == 0
        assert "decoded 2 frames" in out


class TestTrain:
    def test_synthetic_training_saves_model(self, tmp_path):
        out_dir = tmp_path / "run"
        code, out, _ = run_cli(["train", "--synthetic", "3", "--steps", "2",
                                "--crop", "32", "--seed", "1",
                                "--out", str(out_dir)])
        assert code == 0
        assert "trained 2 steps" in out
        model, extra = load_checkpoint(str(out_dir / "model.ckpt"))
        assert extra["beta"] == 1e-3
        assert extra["steps"] == 2
        assert extra["seed"] == 1
        assert (out_dir / "train_curve.csv").exists()


class TestAblateCommands:
    def test_ablate_subset_of_cases(self, tmp_path, workspace):
        out_dir = tmp_path / "ab"
        code, out, _ = run_cli([
            "ablate", "--instance", str(workspace["inst"]),
            "--model", str(workspace["ckpt"]), "--cases", "I,V",
            "--steps", "2", "--eval-interval", "1", "--out", str(out_dir)])
        assert code == 0
        assert "case I: objective" in out
        assert "case V: objective" in out
        assert (out_dir / "ablation.csv").exists()

    def test_temporal_ablate_grid(self, tmp_path, workspace):
        out_dir = tmp_path / "tmp"
        code, out, _ = run_cli([
            "temporal-ablate", "--instance", str(workspace["inst"]),
            "--model", str(workspace["ckpt"]), "--betas", "1e-3",
            "--frames", "1,2", "--steps", "2", "--eval-interval", "1",
            "--out", str(out_dir)])
        assert code == 0
        assert out.count("beta 0.001 frames") == 2
        assert (out_dir / "temporal.csv").exists()


class TestSelectCommand:
    def test_selects_from_instance_folders(self, tmp_path):
        root = tmp_path / "pool"
        for i in range(3):
            synthetic.main([str(root / f"inst{i}"), "--seed", str(20 + i),
                            "--frames", "1", "--size", "32"])
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model(seed=4), str(ckpt),
                        extra={"beta": 1e-3})
        csv_path = tmp_path / "table.csv"
        code, out, _ = run_cli(["select", "--instances", str(root),
                                "--models", str(ckpt), "--n", "1",
                                "--out", str(csv_path)])
        assert code == 0
        lines = out.splitlines()
        assert len(lines) == 1
        assert lines[0] in {"inst0", "inst1", "inst2"}
        assert csv_path.exists()

    def test_model_without_recorded_beta_is_rejected(self, tmp_path):
        root = tmp_path / "pool"
        synthetic.main([str(root / "a"), "--seed", "1", "--frames", "1",
                        "--size", "32"])
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model(seed=4), str(ckpt))
        code, _, err = run_cli(["select", "--instances", str(root),
                                "--models", str(ckpt), "--n", "1"])
        assert code == 1
        assert "error:" in err


class TestHistogramCommand:
    def test_reports_groups_and_writes_csv(self, tmp_path, workspace):
        csv_path = tmp_path / "hist.csv"
        code, out, _ = run_cli(["report-histograms",
                                "--update", str(workspace["ft"] /
                                                "update.ckpt"),
                                "--out", str(csv_path)])
        assert code == 0
        assert "group" in out
        assert "b/px" in out
        assert "decoder_conv" in out
        assert csv_path.exists()
        rows = open(csv_path).read().splitlines()
        assert rows[0] == "group,center,count,bits"
        assert len(rows) > 1


class TestErrors:
    def test_missing_model_file(self, tmp_path):
        code, _, err = run_cli(["decode", str(tmp_path / "nope.iac"),
                                "--model", str(tmp_path / "nope.ckpt"),
                                "--out", str(tmp_path / "d")])
        assert code == 1
        assert err.startswith("error:")

    def test_update_for_different_model_is_rejected(self, tmp_path,
                                                    workspace):
        other = tmp_path / "other.ckpt"
        save_checkpoint(tiny_model(seed=11), str(other))
        code, _, err = run_cli([
            "encode", "--instance", str(workspace["inst"]),
            "--model", str(other),
            "--update", str(workspace["ft"] / "update.ckpt"),
            "--out", str(tmp_path / "s.iac")])
        assert code == 1
        assert "different model" in err

    def test_direct_latent_update_cannot_be_encoded(self, tmp_path,
                                                    workspace):
        ft = tmp_path / "dl"
        code, _, _ = run_cli([
            "finetune", "--instance", str(workspace["inst"]),
            "--model", str(workspace["ckpt"]), "--regime", "direct_latent",
            "--steps", "2", "--eval-interval", "1", "--out", str(ft)])
        assert code == 0
        code, _, err = run_cli([
            "encode", "--instance", str(workspace["inst"]),
            "--model", str(workspace["ckpt"]),
            "--update", str(ft / "update.ckpt"),
            "--out", str(tmp_path / "s.iac")])
        assert code == 1
        assert "direct-latent" in err

    def test_eval_frame_count_mismatch(self, tmp_path, workspace):
        short = tmp_path / "short"
        synthetic.main([str(short), "--seed", "5", "--frames", "1",
                        "--size", "32"])
        code, _, err = run_cli(["eval", str(workspace["stream"]),
                                "--model", str(workspace["ckpt"]),
                                "--ref", str(short)])
        assert code == 1
        assert "frames" in err


class TestEntryPoints:
    def test_python_dash_m_help(self):
        proc = subprocess.run([sys.executable, "-m", "iacodec", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for name in ["train", "finetune", "encode", "decode", "eval",
                     "ablate", "temporal-ablate", "select",
                     "report-histograms"]:
            assert name in proc.stdout
