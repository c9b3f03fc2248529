import json
import subprocess
import sys
import time

import numpy as np
import pytest

from sigfuse.cli import main
from sigfuse.data import load_bank, write_pgm
from sigfuse.nn import make_rng


def run(argv):
    return main(argv)


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    code = run(["synth", "--out-dir", str(out), "--latent-dim", "6",
                "--view", "fv:10:0.05", "--view", "cnn:8:0.15", "--view", "lbp:6:0.4",
                "--attributes", "4", "--train-count", "120", "--val-count", "40",
                "--test-count", "40", "--seed", "5"])
    assert code == 0
    return out


def train_args(synth_dir, out, regime="dedicated:fv", extra=()):
    return ["train", "--regime", regime,
            "--attrs", str(synth_dir / "attrs.txt"),
            "--split-file", str(synth_dir / "partition.txt"),
            "--bank", f"fv={synth_dir / 'fv.fbnk'}",
            "--bank", f"cnn={synth_dir / 'cnn.fbnk'}",
            "--bank", f"lbp={synth_dir / 'lbp.fbnk'}",
            "--profile", "desk", "--epochs", "3", "--batch-size", "32",
            "--lr", "0.05", "--seed", "1", "--out", str(out), *extra]


class TestSynth:
    def test_writes_expected_artifacts(self, synth_dir):
        for name in ("attrs.txt", "partition.txt", "fv.fbnk", "cnn.fbnk",
                     "lbp.fbnk", "manifest.json"):
            assert (synth_dir / name).exists()

    def test_rerun_identical(self, synth_dir, tmp_path):
        other = tmp_path / "data2"
        run(["synth", "--out-dir", str(other), "--latent-dim", "6",
             "--view", "fv:10:0.05", "--view", "cnn:8:0.15", "--view", "lbp:6:0.4",
             "--attributes", "4", "--train-count", "120", "--val-count", "40",
             "--test-count", "40", "--seed", "5"])
        for name in ("attrs.txt", "fv.fbnk", "cnn.fbnk", "lbp.fbnk"):
            assert (synth_dir / name).read_bytes() == (other / name).read_bytes()

    def test_invalid_spec_is_usage_error(self, tmp_path):
        code = run(["synth", "--out-dir", str(tmp_path / "x"),
                    "--view", "fv:0:0.1"])
        assert code == 2


class TestTrain:
    def test_writes_model_log_manifest(self, synth_dir, tmp_path):
        out = tmp_path / "model.hnet"
        assert run(train_args(synth_dir, out, "multistage:fv")) == 0
        assert out.exists()
        assert out.with_suffix(".hnet.log.csv").exists()
        manifest = json.loads(out.with_suffix(".hnet.manifest.json").read_text())
        assert manifest["config"]["regime"] == "multistage:fv"
        assert manifest["artifacts"]["model_sha256"]

    def test_unknown_regime_usage_error(self, synth_dir, tmp_path):
        code = run(train_args(synth_dir, tmp_path / "m.hnet", "boosting"))
        assert code == 2

    def test_manifest_replay_byte_identical(self, synth_dir, tmp_path):
        out1 = tmp_path / "m1.hnet"
        assert run(train_args(synth_dir, out1, "moddrop")) == 0
        manifest = out1.with_suffix(".hnet.manifest.json")
        out2 = tmp_path / "m2.hnet"
        assert run(["train", "--from-manifest", str(manifest),
                    "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_missing_bank_is_data_error(self, synth_dir, tmp_path):
        args = train_args(synth_dir, tmp_path / "m.hnet")
        idx = args.index(f"fv={synth_dir / 'fv.fbnk'}")
        args[idx] = f"fv={synth_dir / 'nope.fbnk'}"
        assert run(args) == 3


class TestEval:
    def test_seven_row_report(self, synth_dir, tmp_path):
        out = tmp_path / "model.hnet"
        assert run(train_args(synth_dir, out, "allfeat")) == 0
        prefix = tmp_path / "report"
        args = ["eval", "--model", str(out),
                "--attrs", str(synth_dir / "attrs.txt"),
                "--split-file", str(synth_dir / "partition.txt"),
                "--bank", f"fv={synth_dir / 'fv.fbnk'}",
                "--bank", f"cnn={synth_dir / 'cnn.fbnk'}",
                "--bank", f"lbp={synth_dir / 'lbp.fbnk'}",
                "--split", "test", "--out-prefix", str(prefix)]
        assert run(args) == 0
        csv_text = (tmp_path / "report.csv").read_text()
        mean_rows = [l for l in csv_text.splitlines() if ",mean_ap," in l]
        assert len(mean_rows) == 7
        first = (tmp_path / "report.csv").read_bytes()
        assert run(args) == 0
        assert (tmp_path / "report.csv").read_bytes() == first

    def test_missing_kind_bank_named(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "model.hnet"
        assert run(train_args(synth_dir, out, "allfeat")) == 0
        args = ["eval", "--model", str(out),
                "--attrs", str(synth_dir / "attrs.txt"),
                "--split-file", str(synth_dir / "partition.txt"),
                "--bank", f"fv={synth_dir / 'fv.fbnk'}",
                "--bank", f"cnn={synth_dir / 'cnn.fbnk'}",
                "--split", "test", "--out-prefix", str(tmp_path / "r")]
        assert run(args) == 3
        assert "lbp" in capsys.readouterr().err


class TestExtractLbp:
    def test_bank_dim_and_determinism(self, tmp_path):
        img_dir = tmp_path / "imgs"
        img_dir.mkdir()
        rng = make_rng(44)
        for i in range(3):
            write_pgm(img_dir / f"face_{i}.pgm",
                      rng.integers(0, 256, size=(218, 178)).astype(np.uint8))
        out = tmp_path / "lbp.fbnk"
        assert run(["extract-lbp", "--images", str(img_dir), "--cell-size", "20",
                    "--out", str(out)]) == 0
        bank = load_bank(out)
        assert bank.dim == 4640 and len(bank.entries) == 3
        first = out.read_bytes()
        assert run(["extract-lbp", "--images", str(img_dir), "--cell-size", "20",
                    "--out", str(out)]) == 0
        assert out.read_bytes() == first

    def test_empty_dir_gives_empty_bank(self, tmp_path):
        img_dir = tmp_path / "empty"
        img_dir.mkdir()
        out = tmp_path / "e.fbnk"
        assert run(["extract-lbp", "--images", str(img_dir), "--out", str(out)]) == 0
        assert load_bank(out).entries == {}

    def test_inconsistent_sizes_rejected(self, tmp_path):
        img_dir = tmp_path / "mixed"
        img_dir.mkdir()
        write_pgm(img_dir / "a.pgm", np.zeros((40, 40), dtype=np.uint8))
        write_pgm(img_dir / "b.pgm", np.zeros((41, 40), dtype=np.uint8))
        assert run(["extract-lbp", "--images", str(img_dir), "--cell-size", "10",
                    "--out", str(tmp_path / "x.fbnk")]) == 3


class TestServeQuery:
    def test_loopback_roundtrip(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "model.hnet"
        assert run(train_args(synth_dir, out, "allfeat")) == 0
        proc = subprocess.Popen(
            [sys.executable, "-m", "sigfuse.cli", "serve", "--model", str(out),
             "--port", "0"],
            stdout=subprocess.PIPE, text=True)
        try:
            line = proc.stdout.readline()
            endpoint = line.strip().rsplit(" ", 1)[-1]
            args = ["query", "--model", str(out), "--endpoint", endpoint,
                    "--mask", "fv,lbp",
                    "--bank", f"fv={synth_dir / 'fv.fbnk'}",
                    "--bank", f"lbp={synth_dir / 'lbp.fbnk'}",
                    "--id", "synth_000000"]
            assert run(args) == 0
            captured = capsys.readouterr()
            assert "FxL" in captured.err
            scores = [float(l.split()[1]) for l in captured.out.splitlines()
                      if l.startswith("attr_")]
            assert len(scores) == 4
            assert all(0 < s < 1 for s in scores)
        finally:
            proc.terminate()
            proc.wait(timeout=10)

    def test_query_missing_bank_for_mask(self, synth_dir, tmp_path):
        out = tmp_path / "model.hnet"
        assert run(train_args(synth_dir, out, "allfeat")) == 0
        args = ["query", "--model", str(out), "--endpoint", "127.0.0.1:1",
                "--mask", "fv,lbp",
                "--bank", f"fv={synth_dir / 'fv.fbnk'}",
                "--id", "synth_000000"]
        assert run(args) == 3

    def test_serve_requires_model(self):
        assert run(["serve"]) == 2


class TestUsage:
    def test_no_command_is_usage_error(self):
        assert run([]) == 2

    def test_unknown_command(self):
        assert run(["frobnicate"]) == 2
