"""End-to-end command pipeline on a miniature configuration."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mvscene import fileio
from mvscene.cli import main

TINY = {
    "n_scenes": 1,
    "seed": 3,
    "synth": {"n_cameras": 5, "width": 40, "height": 40,
              "n_objects": [3, 3], "articulated_fraction": 0.7, "seed": 3},
    "train": {"steps": 12, "views_per_step": 3, "pixels_per_view": 64,
              "points_per_step": 16, "pairs_per_step": 32, "hidden": 16,
              "d_g": 8, "lr": 0.003},
    "teachers": {"d_s": 16},
    "infer": {"fps_budget": 1500, "min_pts": 5},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["supervise", "--config", str(cfg), "--out", str(out)]) == 0
    scene = out / "scene_000"
    tdir = root / "trained"
    assert main(["train", "--config", str(cfg), "--out", str(tdir),
                 "--scenes", str(scene)]) == 0
    idir = root / "inferred"
    assert main(["infer", "--config", str(cfg), "--out", str(idir),
                 "--checkpoint", str(tdir / "checkpoint.bin"),
                 "--scene", str(scene), "--query", "0"]) == 0
    assert main(["eval", "--config", str(cfg), "--scene", str(scene),
                 "--inference", str(idir)]) == 0
    return root, cfg, out, scene, tdir, idir


def tree_hashes(root: Path, skip_prefixes=("timing_",)) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and not any(p.name.startswith(s) for s in skip_prefixes):
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestArtifacts:
    def test_scene_directory_contents(self, workspace):
        _, _, out, scene, _, _ = workspace
        for name in ("scene.ply", "cameras.json", "gt.bin", "supervision.bin"):
            assert (scene / name).exists(), name

    def test_scene_ply_parses(self, workspace):
        _, _, _, scene, _, _ = workspace
        pts, labels, _ = fileio.read_ply(scene / "scene.ply")
        assert pts.shape[1] == 3 and pts.shape[0] > 1000
        assert set(labels) == {"class_id", "instance_id"}

    def test_train_outputs(self, workspace):
        _, _, _, _, tdir, _ = workspace
        log_lines = (tdir / "train_log.jsonl").read_text().strip().split("\n")
        assert len(log_lines) == TINY["train"]["steps"]
        rec = json.loads(log_lines[0])
        assert "total" in rec and "exist" in rec

    def test_infer_outputs(self, workspace):
        _, _, _, _, _, idir = workspace
        for name in ("infer.bin", "fused.ply", "instances.json",
                     "articulation.json", "query_0.ply"):
            assert (idir / name).exists(), name
        art = json.loads((idir / "articulation.json").read_text())
        assert all(a["type"] in ("none", "translation", "rotation") for a in art)
        pts, _, feats = fileio.read_ply(idir / "query_0.ply")
        assert feats["similarity"].shape == (pts.shape[0], 1)
        assert np.abs(feats["similarity"]).max() <= 1.0 + 1e-5

    def test_eval_report_schema(self, workspace):
        _, _, _, _, _, idir = workspace
        rep = json.loads((idir / "eval_report.json").read_text())
        for key in ("miou", "macc", "ap", "ap50", "ap25", "articulation",
                    "motion_cosine", "per_class_iou", "transfer"):
            assert key in rep, key
        for v in (rep["miou"], rep["macc"], rep["ap25"],
                  rep["articulation"]["iou"]):
            assert 0.0 <= v <= 1.0


class TestReproducibility:
    def test_synth_rerun_is_noop(self, workspace, capsys):
        _, cfg, out, _, _, _ = workspace
        before = tree_hashes(out)
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
        assert "up to date" in capsys.readouterr().out
        assert tree_hashes(out) == before

    def test_synth_force_rerun_byte_identical(self, workspace, tmp_path):
        _, cfg, out, _, _, _ = workspace
        other = tmp_path / "again"
        assert main(["synth", "--config", str(cfg), "--out", str(other)]) == 0
        a = tree_hashes(out)
        b = tree_hashes(other)
        shared = {k for k in a if k.startswith("scene_")} \
            & {k for k in b if k.startswith("scene_")}
        assert shared
        for k in shared:
            assert a[k] == b[k], k

    def test_train_rerun_byte_identical(self, workspace, tmp_path):
        root, cfg, out, scene, tdir, _ = workspace
        again = tmp_path / "train2"
        assert main(["train", "--config", str(cfg), "--out", str(again),
                     "--scenes", str(scene)]) == 0
        assert (again / "checkpoint.bin").read_bytes() \
            == (tdir / "checkpoint.bin").read_bytes()
        assert (again / "train_log.jsonl").read_bytes() \
            == (tdir / "train_log.jsonl").read_bytes()


class TestErrorHandling:
    def test_unknown_config_field_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"synth": {"not_a_field": 1}}))
        rc = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "not_a_field" in capsys.readouterr().err

    def test_invalid_json_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{nope")
        rc = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "line" in capsys.readouterr().err

    def test_missing_scene_exits_3(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(TINY))
        rc = main(["supervise", "--config", str(cfg), "--out", str(tmp_path / "empty")])
        assert rc == 3

    def test_checkpoint_dim_mismatch_exits_3(self, workspace, tmp_path, capsys):
        root, cfg, out, scene, tdir, _ = workspace
        from mvscene.model import init_head_params, save_checkpoint
        bad = tmp_path / "bad.bin"
        save_checkpoint(bad, init_head_params(32, 16, 8, 16, seed=0))
        rc = main(["infer", "--config", str(cfg), "--out", str(tmp_path / "o"),
                   "--checkpoint", str(bad), "--scene", str(scene)])
        assert rc == 3
        assert "backbone dim" in capsys.readouterr().err

    def test_eval_mode_mismatch_exits_3(self, workspace, tmp_path, capsys):
        root, cfg, out, scene, tdir, idir = workspace
        rc = main(["eval", "--config", str(cfg), "--scene", str(scene),
                   "--inference", str(idir), "--gt-geometry", "--force"])
        assert rc == 3
