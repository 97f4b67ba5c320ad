"""End-to-end command tests on miniature configurations."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from coex.cli import main
from coex.networks import (ExpertConfig, ExpertNet, GateConfig, GateNet,
                           ModelBundle, load_checkpoint, save_checkpoint)
from coex.noise import load_image


def run_cli(*args):
    return main([str(a) for a in args])


def dir_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(
                p.read_bytes()).hexdigest()
    return out


TINY_TRAIN = ["--experts", 2, "--expert", "d2c4", "--patch", 16,
              "--patches-per-batch", 4, "--pretrain-epochs", 2,
              "--compete-epochs", 3, "--iters-per-epoch", 10,
              "--noise", "awgn=5,50", "--checkpoint-every", 2]


@pytest.fixture()
def dataset(tmp_path):
    data = tmp_path / "data"
    assert run_cli("synth", "--out", data, "--procedural", 5,
                   "--size", 48, "--seed", 3) == 0
    return data


class TestSynth:
    def test_procedural_outputs_and_manifest(self, tmp_path):
        out = tmp_path / "ds"
        assert run_cli("synth", "--out", out, "--procedural", 4,
                       "--size", 32, "--seed", 7) == 0
        images = sorted(out.glob("*.pgm"))
        assert len(images) == 4
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["seed"] == 7
        listed = {e["path"] for e in manifest["outputs"]}
        assert listed == {p.name for p in images}
        for entry in manifest["outputs"]:
            digest = hashlib.sha256((out / entry["path"]).read_bytes()).hexdigest()
            assert digest == entry["sha256"]

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("synth", "--out", out, "--procedural", 3,
                           "--size", 32, "--seed", 11) == 0
        assert dir_digest(a) == dir_digest(b)

    def test_grid_csv_values(self, tmp_path):
        out = tmp_path / "g"
        assert run_cli("synth", "--out", out, "--grid", "awgn", "--n", 68) == 0
        lines = (out / "grid_awgn.csv").read_text().strip().splitlines()
        assert lines[0] == "image_index,source,level"
        assert len(lines) == 69
        last = lines[-1].split(",")
        assert abs(float(last[2]) - 54.191) < 1e-3

    def test_degrade_writes_noisy_set(self, tmp_path):
        out = tmp_path / "d"
        assert run_cli("synth", "--out", out, "--procedural", 4, "--size", 48,
                       "--grid", "jpeg", "--n", 4, "--degrade", "--seed", 5) == 0
        assert len(list(out.glob("noisy_jpeg_*.pgm"))) == 4

    def test_no_action_is_an_error(self, tmp_path):
        assert run_cli("synth", "--out", tmp_path / "x") == 1

    def test_import_images(self, tmp_path, dataset):
        out = tmp_path / "imported"
        assert run_cli("synth", "--out", out, "--from-images", dataset) == 0
        assert len(list(out.glob("img_*.pgm"))) == 5


class TestTrain:
    def test_run_directory_contents(self, tmp_path, dataset):
        run = tmp_path / "run"
        assert run_cli("train", "--data", dataset, "--out", run,
                       "--seed", 5, *TINY_TRAIN) == 0
        assert (run / "config.txt").exists()
        assert (run / "trainlog.csv").exists()
        assert (run / "final.ckpt").exists()
        assert (run / "run_manifest.json").exists()
        ckpts = sorted((run / "checkpoints").glob("epoch_*.ckpt"))
        assert [p.name for p in ckpts] == ["epoch_0002.ckpt", "epoch_0004.ckpt",
                                           "epoch_0005.ckpt"]
        log = (run / "trainlog.csv").read_text().splitlines()
        assert log[0] == "epoch,expert_id,wins,mean_winning_loss,eval_psnr"
        assert len(log) == 1 + 5 * 2  # five epochs, two experts

    def test_config_file_round_trip(self, tmp_path, dataset):
        run = tmp_path / "run"
        assert run_cli("train", "--data", dataset, "--out", run,
                       "--seed", 9, *TINY_TRAIN) == 0
        run2 = tmp_path / "run2"
        assert run_cli("train", "--data", dataset, "--out", run2,
                       "--config", run / "config.txt") == 0
        assert (run / "trainlog.csv").read_bytes() == \
               (run2 / "trainlog.csv").read_bytes()

    def test_single_expert_training(self, tmp_path, dataset):
        run = tmp_path / "run1"
        assert run_cli("train", "--data", dataset, "--out", run, "--seed", 4,
                       "--experts", 1, "--expert", "d2c2", "--patch", 16,
                       "--patches-per-batch", 2, "--pretrain-epochs", 1,
                       "--compete-epochs", 1, "--iters-per-epoch", 5) == 0
        bundle = load_checkpoint(run / "final.ckpt")
        assert len(bundle.experts) == 1

    def test_resumed_run_matches_uninterrupted(self, tmp_path, dataset):
        full = tmp_path / "full"
        assert run_cli("train", "--data", dataset, "--out", full,
                       "--seed", 13, *TINY_TRAIN) == 0
        # interrupt after epoch 4 (checkpoint boundary), then resume
        part = tmp_path / "part"
        assert run_cli("train", "--data", dataset, "--out", part,
                       "--seed", 13, *TINY_TRAIN, "--stop-after", 4) == 0
        assert not (part / "final.ckpt").exists()
        assert run_cli("train", "--resume", part) == 0
        assert (part / "trainlog.csv").read_bytes() == \
               (full / "trainlog.csv").read_bytes()
        assert (part / "final.ckpt").read_bytes() == \
               (full / "final.ckpt").read_bytes()

    def test_missing_dataset_is_single_line_error(self, tmp_path, capsys):
        assert run_cli("train", "--data", tmp_path / "nope",
                       "--out", tmp_path / "r") == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:") and "\n" not in err


class TestEval:
    @pytest.fixture()
    def checkpoint(self, tmp_path, dataset):
        run = tmp_path / "run"
        assert run_cli("train", "--data", dataset, "--out", run,
                       "--seed", 21, *TINY_TRAIN) == 0
        return run / "final.ckpt"

    def test_report_and_summary(self, tmp_path, dataset, checkpoint):
        out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", checkpoint, "--data", dataset,
                       "--out", out, "--grid", "awgn", "--n", 5,
                       "--seed", 2) == 0
        rows = (out / "report.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 5
        summary = (out / "summary.csv").read_text().strip().splitlines()
        src, count, finite, mean_psnr, _ = summary[1].split(",")
        per_image = [float(r.split(",")[5]) for r in rows[1:]
                     if r.split(",")[5] != "inf"]
        assert src == "awgn" and int(count) == 5
        assert abs(float(mean_psnr) - np.mean(per_image)) < 1e-9

    def test_identity_checkpoint_reproduces_input_psnr(self, tmp_path, dataset):
        experts = [ExpertNet(ExpertConfig(2, 2)) for _ in range(2)]
        bundle = ModelBundle(experts=experts, gate=GateNet(GateConfig(2)))
        ckpt = tmp_path / "identity.ckpt"
        save_checkpoint(ckpt, bundle)
        out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", ckpt, "--data", dataset,
                       "--out", out, "--grid", "both", "--n", 4) == 0
        for row in (out / "report.csv").read_text().strip().splitlines()[1:]:
            cells = row.split(",")
            assert cells[4] == cells[5]  # input_psnr == psnr

    def test_assignment_and_complexity_outputs(self, tmp_path, dataset,
                                               checkpoint):
        out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", checkpoint, "--data", dataset,
                       "--out", out, "--n", 3, "--assignment",
                       "--complexity") == 0
        assert (out / "assignment.csv").exists()
        comp = (out / "complexity.csv").read_text().splitlines()
        total = int(comp[1].split(",")[2])
        assert total > 0

    def test_complexity_reference_value(self, tmp_path, dataset):
        experts = [ExpertNet(ExpertConfig(5, 16)) for _ in range(7)]
        bundle = ModelBundle(experts=experts, gate=GateNet(GateConfig(7)))
        ckpt = tmp_path / "d5c16.ckpt"
        save_checkpoint(ckpt, bundle)
        out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", ckpt, "--data", dataset,
                       "--out", out, "--n", 2, "--complexity",
                       "--width", 481, "--height", 321) == 0
        row = (out / "complexity.csv").read_text().splitlines()[1].split(",")
        assert abs(float(row[4]) - 8231) <= 1.0

    def test_grid_larger_than_dataset_rejected(self, tmp_path, dataset,
                                               checkpoint):
        assert run_cli("eval", "--checkpoint", checkpoint, "--data", dataset,
                       "--out", tmp_path / "e", "--n", 50) == 1

    def test_dump_images(self, tmp_path, dataset, checkpoint):
        out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", checkpoint, "--data", dataset,
                       "--out", out, "--grid", "awgn", "--n", 2,
                       "--dump-images") == 0
        dumped = list((out / "images").glob("*.pgm"))
        assert len(dumped) == 4  # noisy + denoised per row
        for p in dumped:
            img = load_image(p)
            assert img.shape == (48, 48)


class TestVerify:
    def test_fresh_checkout_passes(self, tmp_path, capsys):
        out = tmp_path / "verify"
        assert run_cli("verify", "--out", out) == 0
        text = capsys.readouterr().out
        assert "all checks passed" in text
        report = (out / "verify_report.txt").read_text()
        assert "FAIL" not in report
        assert "max_rel_err" in report

    def test_injected_sign_error_is_caught(self, monkeypatch, capsys):
        import coex.nn as nn_mod
        import coex.networks as net_mod
        original = nn_mod._conv_backward

        def flipped(grad_out, cols, weight, need_input_grad=True, scratch=None):
            gx, gw, gb = original(grad_out, cols, weight,
                                  need_input_grad=need_input_grad,
                                  scratch=scratch)
            return gx, -gw, gb  # deliberately wrong weight gradient

        monkeypatch.setattr(nn_mod, "_conv_backward", flipped)
        report = net_mod.expert_gradient_report()
        assert not report.passed
        assert report.max_rel_error > 0.5
