"""Command-line behavior: exit codes, files written, output schema."""
import json

import numpy as np
import pytest

import aecnn.geometry as geo
from aecnn.cli import main
from aecnn.config import (
    NetworkConfig,
    SaFirstConfig,
    SaNextConfig,
    TrainConfig,
    save_config,
)
from aecnn.data import save_dataset_bin, save_xyz, synth_classification
from aecnn.lrf import compute_lrf, rir
from aecnn.nn import load_checkpoint


def tiny_cfg(**kw):
    base = dict(
        n_points=24,
        n_classes=4,
        sa_first=SaFirstConfig(n_ref=8, k=6, widths=(8, 12)),
        sa_next=(SaNextConfig(k=4, widths=(12, 16)),),
        head_widths=(12,),
        aeconv1_hidden=8,
        fp_align_hidden=8,
    )
    base.update(kw)
    return NetworkConfig(**base)


def tiny_seg_cfg():
    return tiny_cfg(n_classes=2, n_parts=2, fp_widths=(12, 8), point_head=(8,))


def write_cfg(path, network, training=None):
    save_config(path, network, training or TrainConfig(
        epochs=2, batch_size=8, seed=1, setting="ARAR"))
    return str(path)


def run_lines(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out.strip()
    lines = [json.loads(l) for l in out.splitlines() if l]
    return code, lines


class TestTrain:
    def test_writes_artifacts_and_record(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.ini", tiny_cfg())
        out = tmp_path / "run"
        code, lines = run_lines(capsys, [
            "train", cfg, str(out), "--n-per-class", "3"])
        assert code == 0
        assert lines[0]["type"] == "run"
        assert lines[0]["schema"] == 1
        assert lines[-1]["type"] == "summary"
        assert "accuracy" in lines[-1]["metrics"]
        assert (out / "model.ckpt").exists()
        assert (out / "config.ini").exists()
        recorded = [json.loads(l) for l in
                    (out / "run.jsonl").read_text().splitlines()]
        assert recorded[0]["type"] == "run"
        assert recorded[-1]["type"] == "summary"
        epochs = [r for r in recorded if r["type"] == "epoch"]
        assert len(epochs) == 2

    def test_flag_overrides_config(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.ini", tiny_cfg())
        out = tmp_path / "run"
        code, lines = run_lines(capsys, [
            "train", cfg, str(out), "--n-per-class", "2",
            "--epochs", "1", "--setting", "YY", "--seed", "9"])
        assert code == 0
        assert lines[0]["seed"] == 9
        assert lines[0]["setting"] == "YY"
        epochs = [l for l in lines if l["type"] == "epoch"]
        assert len(epochs) == 1

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        save_config(path, tiny_cfg())
        text = path.read_text().replace("variant = aeconv3", "variant = bogus")
        path.write_text(text)
        code = main(["train", str(path), str(tmp_path / "o")])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = main(["train", str(tmp_path / "nope.ini"), str(tmp_path / "o")])
        assert code == 2

    def test_resume_appends_record(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.ini", tiny_cfg())
        out = tmp_path / "run"
        argv = ["train", cfg, str(out), "--n-per-class", "2", "--epochs", "4"]
        assert main(argv[:-1] + ["2"]) == 0
        assert main(argv) == 0
        capsys.readouterr()
        recorded = [json.loads(l) for l in
                    (out / "run.jsonl").read_text().splitlines()]
        epochs = [r["epoch"] for r in recorded if r["type"] == "epoch"]
        assert epochs == [0, 1, 2, 3]

    def test_trains_segmentation_models(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.ini", tiny_seg_cfg())
        out = tmp_path / "run"
        code, lines = run_lines(capsys, [
            "train", cfg, str(out), "--n-per-class", "2", "--epochs", "1"])
        assert code == 0
        assert "miou" in lines[-1]["metrics"]

    def test_file_dataset(self, tmp_path, capsys):
        ds = synth_classification(2, 24, np.random.default_rng(0))
        data_path = tmp_path / "train.aeds"
        save_dataset_bin(data_path, ds)
        cfg = write_cfg(tmp_path / "c.ini", tiny_cfg())
        out = tmp_path / "run"
        code, lines = run_lines(capsys, [
            "train", cfg, str(out), "--epochs", "1",
            "--dataset", str(data_path), "--eval-dataset", str(data_path)])
        assert code == 0
        assert lines[-1]["metrics"]["accuracy"] >= 0.0


class TestEval:
    def make_run(self, tmp_path, capsys, network=None):
        cfg = write_cfg(tmp_path / "c.ini", network or tiny_cfg())
        out = tmp_path / "run"
        assert main(["train", cfg, str(out), "--n-per-class", "2",
                     "--epochs", "1"]) == 0
        capsys.readouterr()
        return out / "model.ckpt"

    def test_eval_synth(self, tmp_path, capsys):
        ckpt = self.make_run(tmp_path, capsys)
        code, lines = run_lines(capsys, [
            "eval", str(ckpt), "synth-classification", "--n-per-class", "2",
            "--setting", "YAR"])
        assert code == 0
        assert lines[0]["type"] == "metrics"
        assert lines[0]["setting"] == "YAR"
        assert 0.0 <= lines[0]["accuracy"] <= 1.0

    def test_eval_votes_and_determinism(self, tmp_path, capsys):
        ckpt = self.make_run(tmp_path, capsys)
        argv = ["eval", str(ckpt), "synth-classification", "--n-per-class",
                "2", "--votes", "3", "--seed", "4"]
        _, first = run_lines(capsys, argv)
        _, second = run_lines(capsys, argv)
        assert first == second

    def test_eval_file_dataset(self, tmp_path, capsys):
        ckpt = self.make_run(tmp_path, capsys)
        ds = synth_classification(2, 24, np.random.default_rng(1))
        path = tmp_path / "test.aeds"
        save_dataset_bin(path, ds)
        code, lines = run_lines(capsys, ["eval", str(ckpt), str(path)])
        assert code == 0
        assert lines[0]["type"] == "metrics"

    def test_eval_segmentation_reports_miou(self, tmp_path, capsys):
        ckpt = self.make_run(tmp_path, capsys, network=tiny_seg_cfg())
        code, lines = run_lines(capsys, [
            "eval", str(ckpt), "synth-segmentation", "--n-per-class", "2"])
        assert code == 0
        assert "miou" in lines[0]

    def test_missing_checkpoint_exits_2(self, tmp_path, capsys):
        ckpt = self.make_run(tmp_path, capsys)
        code = main(["eval", str(tmp_path / "ghost.ckpt"),
                     "synth-classification", "--config",
                     str(tmp_path / "run" / "config.ini")])
        assert code == 2

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = main(["eval", str(tmp_path / "ghost.ckpt"),
                     "synth-classification"])
        assert code == 2
        assert "config" in capsys.readouterr().err


class TestInvarianceAudit:
    def make_run(self, tmp_path, capsys, network=None):
        cfg = write_cfg(tmp_path / "c.ini", network or tiny_cfg())
        out = tmp_path / "run"
        assert main(["train", cfg, str(out), "--n-per-class", "2",
                     "--epochs", "1"]) == 0
        capsys.readouterr()
        return out / "model.ckpt"

    def test_invariant_model_passes(self, tmp_path, capsys):
        ckpt = self.make_run(tmp_path, capsys)
        code, lines = run_lines(capsys, [
            "invariance-audit", str(ckpt), "--clouds", "3",
            "--rotations", "4"])
        assert code == 0
        report = lines[0]
        assert report["type"] == "audit"
        assert report["passed"] is True
        assert report["max_abs_deviation"] < 1e-5
        assert report["argmax_agreement"] == 1.0

    def test_absolute_baseline_fails_with_exit_3(self, tmp_path, capsys):
        net = tiny_cfg(features="absolute", variant="edgeconv")
        ckpt = self.make_run(tmp_path, capsys, network=net)
        code, lines = run_lines(capsys, [
            "invariance-audit", str(ckpt), "--clouds", "3",
            "--rotations", "4"])
        assert code == 3
        assert lines[0]["passed"] is False
        assert lines[0]["max_abs_deviation"] > 1e-2

    def test_zero_rotations_vacuous_pass(self, tmp_path, capsys):
        ckpt = self.make_run(tmp_path, capsys)
        code, lines = run_lines(capsys, [
            "invariance-audit", str(ckpt), "--rotations", "0"])
        assert code == 0
        assert "warning" in lines[0]


class TestAblate:
    def test_small_grid(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.ini", tiny_cfg())
        out = tmp_path / "abl"
        code, lines = run_lines(capsys, [
            "ablate", cfg, str(out), "--variants", "edgeconv,aeconv3",
            "--searches", "knn", "--anchors", "mean", "--ks", "6",
            "--seeds", "0", "--epochs", "1", "--n-per-class", "2"])
        assert code == 0
        header = lines[0]
        assert header["type"] == "ablation_header"
        assert header["cells"] == 2
        rows = [l for l in lines if l["type"] == "ablation"]
        assert len(rows) == 2
        by_variant = {r["variant"]: r for r in rows}
        assert by_variant["aeconv3"]["parameters"] > 0
        assert by_variant["aeconv3"]["macs_per_sample"] > \
            by_variant["edgeconv"]["macs_per_sample"]
        saved = [json.loads(l) for l in
                 (out / "ablation.jsonl").read_text().splitlines()]
        assert len(saved) == 2

    def test_default_grid_is_full_cross_product(self, tmp_path, capsys):
        # Only the header math; running 48 trainings is a flag away.
        from aecnn.cli import ABLATION_ANCHORS, ABLATION_KS, \
            ABLATION_SEARCHES, ABLATION_VARIANTS
        assert len(ABLATION_VARIANTS) * len(ABLATION_SEARCHES) * \
            len(ABLATION_ANCHORS) * len(ABLATION_KS) == 48


class TestLrfDump:
    def test_dump_matches_library(self, tmp_path, capsys):
        pts = np.array([
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.5, 0.5, 0.0],
        ])
        path = tmp_path / "toy.xyz"
        save_xyz(path, geo.PointCloud(pts))
        code, lines = run_lines(capsys, ["lrf-dump", str(path), "--k", "3"])
        assert code == 0
        assert lines[0]["type"] == "lrf_dump_header"
        assert lines[0]["points"] == 5
        rows = lines[1:]
        assert len(rows) == 5
        row = rows[2]
        nb_idx = row["neighbors"]
        frame = compute_lrf(pts[2], pts[nb_idx])
        assert np.allclose(row["basis"], frame.basis, atol=1e-12)
        for j, rr in zip(nb_idx, row["rirs"]):
            assert np.allclose(rr, rir(pts[j], frame), atol=1e-12)

    def test_rotated_dump_same_rirs(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(12, 3))
        rot = geo.sample_arbitrary_rotation(rng)
        a = tmp_path / "a.xyz"
        b = tmp_path / "b.xyz"
        save_xyz(a, geo.PointCloud(pts))
        save_xyz(b, geo.PointCloud(pts @ rot.T))
        _, la = run_lines(capsys, ["lrf-dump", str(a), "--k", "4"])
        _, lb = run_lines(capsys, ["lrf-dump", str(b), "--k", "4"])
        for ra, rb in zip(la[1:], lb[1:]):
            assert ra["neighbors"] == rb["neighbors"]
            assert not np.allclose(ra["basis"], rb["basis"], atol=1e-6)
            assert np.allclose(ra["rirs"], rb["rirs"], atol=1e-9)

    def test_bad_path_exits_2(self, tmp_path, capsys):
        assert main(["lrf-dump", str(tmp_path / "ghost.xyz")]) == 2

    def test_malformed_file_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.xyz"
        path.write_text("1 2\n")
        assert main(["lrf-dump", str(path)]) == 2
        assert "line 1" in capsys.readouterr().err
