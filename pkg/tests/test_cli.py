import json

import numpy as np
import pytest

from bevkit.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from bevkit.metrics import evaluate_detections, load_boxes
from bevkit.pipeline import PipelineConfig

SMALL = dict(n_depth_bins=24, n_context=12, bev_cells=64, bev_range=32.0,
             kan_hidden=(16,), radar_channels=8)


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    PipelineConfig(**SMALL).to_json(path)
    return path


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    rc = main(["gen", "--out", str(out), "--seed", "23", "--objects", "5",
               "--radar-density", "1000", "--lidar-density", "3000"])
    assert rc == EXIT_OK
    # shrink the backbone features for test speed
    spec_manifest = json.loads((out / "scene.json").read_text())
    assert spec_manifest["seed"] == 23
    return out


class TestGen:
    def test_gen_writes_bundle(self, scene_dir):
        names = {p.name for p in scene_dir.iterdir()}
        assert {"scene.json", "radar.pc4d", "lidar.pc4d", "gt_boxes.json"} <= names

    def test_gen_with_csv_clouds(self, tmp_path):
        csv = tmp_path / "radar.csv"
        csv.write_text("x,y,z,r\n1.0,2.0,0.1,0.5\n3.0,-1.0,0.2,0.9\n")
        out = tmp_path / "scene"
        rc = main(["gen", "--out", str(out), "--seed", "1", "--objects", "2",
                   "--radar-csv", str(csv)])
        assert rc == EXIT_OK
        from bevkit.pillars import read_pc4d
        cloud = read_pc4d(out / "radar.pc4d")
        assert len(cloud) == 2
        np.testing.assert_allclose(cloud.points[0], [1.0, 2.0, 0.1, 0.5], atol=1e-6)

    def test_gen_from_spec_json(self, tmp_path):
        spec_json = {
            "seed": 5,
            "cameras": [{
                "intrinsics": [[100.0, 0.0, 32.0], [0.0, 100.0, 24.0], [0.0, 0.0, 1.0]],
                "rotation": np.eye(3).tolist(),
                "translation": [0.0, 0.0, 0.0],
                "image_size": [48, 64],
            }],
            "ego_trajectory": [{"rotation": np.eye(3).tolist(),
                                "translation": [0.0, 0.0, 0.0], "timestamp": 0.0}],
            "objects": [],
            "radar_density": 500,
            "lidar_density": 500,
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec_json))
        rc = main(["gen", "--out", str(tmp_path / "scene"), "--spec", str(spec_path)])
        assert rc == EXIT_OK
        assert (tmp_path / "scene" / "scene.json").exists()


class TestRun:
    def test_run_and_rerun_deterministic(self, scene_dir, config_path, tmp_path):
        for name in ("r1", "r2"):
            rc = main(["run", "--scene", str(scene_dir), "--out", str(tmp_path / name),
                       "--config", str(config_path), "--sequential"])
            assert rc == EXIT_OK
        a = (tmp_path / "r1" / "predictions.json").read_bytes()
        b = (tmp_path / "r2" / "predictions.json").read_bytes()
        assert a == b

    def test_run_missing_scene_fails(self, tmp_path, config_path):
        rc = main(["run", "--scene", str(tmp_path / "missing"), "--out",
                   str(tmp_path / "out"), "--config", str(config_path)])
        assert rc == EXIT_IO

    def test_pooling_flag_override(self, scene_dir, config_path, tmp_path):
        rc = main(["run", "--scene", str(scene_dir), "--out", str(tmp_path / "p"),
                   "--config", str(config_path), "--pooling", "reference",
                   "--workers", "1"])
        assert rc == EXIT_OK


class TestEval:
    def test_eval_roundtrip_idempotent(self, scene_dir, config_path, tmp_path):
        main(["run", "--scene", str(scene_dir), "--out", str(tmp_path / "run"),
              "--config", str(config_path), "--sequential"])
        pred = tmp_path / "run" / "predictions.json"
        gt = scene_dir / "gt_boxes.json"
        out1 = tmp_path / "sum1.json"
        out2 = tmp_path / "sum2.json"
        assert main(["eval", "--pred", str(pred), "--gt", str(gt),
                     "--out", str(out1)]) == EXIT_OK
        assert main(["eval", "--pred", str(pred), "--gt", str(gt),
                     "--out", str(out2)]) == EXIT_OK
        s1, s2 = json.loads(out1.read_text()), json.loads(out2.read_text())
        s1.pop("eval_time"), s2.pop("eval_time")
        assert s1 == s2
        # and matches calling the library directly
        direct = evaluate_detections(load_boxes(pred), load_boxes(gt))
        assert abs(direct.nds - s1["nds"]) < 1e-12

    def test_empty_predictions_zero_map(self, scene_dir, tmp_path):
        pred = tmp_path / "empty.json"
        pred.write_text(json.dumps({"sample-0": []}))
        out = tmp_path / "sum.json"
        rc = main(["eval", "--pred", str(pred), "--gt",
                   str(scene_dir / "gt_boxes.json"), "--out", str(out)])
        assert rc == EXIT_OK
        assert json.loads(out.read_text())["mean_ap"] == 0.0

    def test_token_mismatch_validation_error(self, scene_dir, tmp_path):
        pred = tmp_path / "bad.json"
        pred.write_text(json.dumps({"other-token": []}))
        rc = main(["eval", "--pred", str(pred), "--gt", str(scene_dir / "gt_boxes.json")])
        assert rc == EXIT_VALIDATION

    def test_missing_file_io_error(self, tmp_path):
        rc = main(["eval", "--pred", str(tmp_path / "nope.json"),
                   "--gt", str(tmp_path / "nope.json")])
        assert rc == EXIT_IO


class TestCheckTables:
    def test_exit_zero_and_prints_cells(self, capsys):
        assert main(["check-tables"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "radar_camera_fusion/NDS" in out
        assert "FAIL" not in out


class TestBench:
    def test_emits_csv(self, capsys, tmp_path):
        out_csv = tmp_path / "bench.csv"
        rc = main(["bench", "--m", "20000", "--c", "8", "--workers", "2",
                   "--out", str(out_csv)])
        assert rc == EXIT_OK
        text = out_csv.read_text().splitlines()
        assert text[0] == "impl,M,C,nx,ny,workers,seconds"
        assert len(text) == 4
