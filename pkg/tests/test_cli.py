"""Command-line flows: gen-scene, train, render, eval, ablate, gradcheck."""

import json

import numpy as np
import pytest

from splat4d.cli import main
from splat4d.io import load_checkpoint, read_ppm
from splat4d.scenegen import load_dataset


@pytest.fixture(scope="module")
def ds_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    code = main([
        "gen-scene", "--preset", "linear", "--cams", "2", "--test-cams", "1",
        "--span", "40", "--frames", "3", "--size", "32", "--seed", "11",
        "--out", str(out),
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(ds_dir, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("cli_train") / "model.ckpt"
    code = main([
        "train", "--data", str(ds_dir), "--iterations", "8",
        "--decay", "constant", "--seed", "3", "--out", str(ckpt),
    ])
    assert code == 0
    return ckpt


class TestGenScene:
    def test_output_layout(self, ds_dir):
        assert (ds_dir / "manifest.json").exists()
        assert (ds_dir / "gt_scene.ckpt").exists()
        ds = load_dataset(ds_dir)
        assert len(ds.frames) == 3 * 3
        assert {f.split for f in ds.frames} == {"train", "test"}

    def test_invalid_rig_is_usage_error(self, tmp_path, capsys):
        code = main(["gen-scene", "--preset", "linear", "--cams", "1",
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_preset_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["gen-scene", "--preset", "spiral",
                  "--out", str(tmp_path / "x")])
        assert exc.value.code == 2


class TestTrain:
    def test_artifacts(self, trained, capsys):
        ckpt = load_checkpoint(trained)
        echo = ckpt.config_echo
        assert echo["iterations"] == 8
        assert echo["iterations_trained"] == 8
        assert echo["decay_variant"] == "constant"
        assert echo["rng_seed"] == 3
        log = trained.parent / (trained.name + ".log.jsonl")
        records = [json.loads(line) for line in
                   log.read_text().splitlines()]
        assert sum(r["type"] == "iter" for r in records) == 8
        assert records[-1]["type"] == "summary"

    def test_missing_dataset(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "m.ckpt")])
        assert code == 3
        assert "error:" in capsys.readouterr().err

    def test_unreadable_config(self, ds_dir, tmp_path, capsys):
        bad = tmp_path / "cfg.json"
        bad.write_text("{oops")
        code = main(["train", "--data", str(ds_dir), "--config", str(bad),
                     "--out", str(tmp_path / "m.ckpt")])
        assert code == 3
        assert "unreadable config" in capsys.readouterr().err

    def test_unknown_config_key_is_usage_error(self, ds_dir, tmp_path, capsys):
        bad = tmp_path / "cfg.json"
        bad.write_text(json.dumps({"iterations": 2, "momentum": 0.9}))
        code = main(["train", "--data", str(ds_dir), "--config", str(bad),
                     "--out", str(tmp_path / "m.ckpt")])
        assert code == 2
        assert "unknown train config" in capsys.readouterr().err

    def test_config_file_applies(self, ds_dir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"iterations": 2, "loss_lambda": 0.0}))
        out = tmp_path / "m.ckpt"
        code = main(["train", "--data", str(ds_dir), "--config", str(cfg),
                     "--out", str(out)])
        assert code == 0
        echo = load_checkpoint(out).config_echo
        assert echo["iterations"] == 2
        assert echo["loss_lambda"] == 0.0

    def test_missing_required_flags(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2


class TestRender:
    def test_camera_id_with_depth(self, ds_dir, trained, tmp_path, capsys):
        img_path = tmp_path / "view.ppm"
        depth_path = tmp_path / "depth.ppm"
        code = main([
            "render", "--ckpt", str(trained), "--data", str(ds_dir),
            "--camera-id", "0", "--time", "0.5",
            "--out", str(img_path), "--depth", str(depth_path),
        ])
        assert code == 0
        img = read_ppm(img_path)
        assert img.shape == (32, 32, 3)
        depth = read_ppm(depth_path)
        assert depth.min() >= 0.0 and depth.max() <= 1.0
        out = capsys.readouterr().out
        assert str(img_path) in out and str(depth_path) in out

    def test_pose_file(self, ds_dir, trained, tmp_path):
        ds = load_dataset(ds_dir)
        pose = tmp_path / "pose.json"
        pose.write_text(json.dumps(ds.cameras[2].to_json()))
        out = tmp_path / "posed.ppm"
        code = main(["render", "--ckpt", str(trained), "--pose", str(pose),
                     "--time", "0.0", "--out", str(out)])
        assert code == 0
        assert read_ppm(out).shape == (32, 32, 3)

    def test_unknown_camera_id(self, ds_dir, trained, tmp_path, capsys):
        code = main(["render", "--ckpt", str(trained), "--data", str(ds_dir),
                     "--camera-id", "7", "--time", "0.0",
                     "--out", str(tmp_path / "x.ppm")])
        assert code == 3
        assert "no camera id" in capsys.readouterr().err

    def test_camera_source_required(self, trained, tmp_path, capsys):
        code = main(["render", "--ckpt", str(trained), "--time", "0.0",
                     "--out", str(tmp_path / "x.ppm")])
        assert code == 2
        code = main(["render", "--ckpt", str(trained), "--camera-id", "0",
                     "--time", "0.0", "--out", str(tmp_path / "x.ppm")])
        assert code == 2

    def test_missing_checkpoint(self, ds_dir, tmp_path, capsys):
        code = main(["render", "--ckpt", str(tmp_path / "none.ckpt"),
                     "--data", str(ds_dir), "--camera-id", "0",
                     "--time", "0.0", "--out", str(tmp_path / "x.ppm")])
        assert code == 3


class TestEval:
    def test_exact_scene_report(self, ds_dir, tmp_path, capsys):
        report = tmp_path / "report.csv"
        code = main(["eval", "--ckpt", str(ds_dir / "gt_scene.ckpt"),
                     "--data", str(ds_dir), "--split", "test",
                     "--report", str(report)])
        assert code == 0
        lines = report.read_text().splitlines()
        assert lines[0] == "# splat4d evaluation report"
        assert lines[1].startswith("# checkpoint:")
        assert "split: test" in lines[1]
        assert lines[2].startswith("# renders quantized to 8 bits")
        assert "(1-ssim)/2" in lines[2]
        assert lines[3] == "path,camera_id,time,psnr_db,dssim1,dssim2"
        rows = [line.split(",") for line in lines[4:-1]]
        assert len(rows) == 3
        for row in rows:
            assert row[3] == "99.000000"
            assert row[4] == "0.000000"
        assert lines[-1].startswith("mean,,,99.000000")
        assert report.read_text() in capsys.readouterr().out

    def test_dssim_scale_flag(self, ds_dir, trained, tmp_path):
        halved = tmp_path / "halved.csv"
        full = tmp_path / "full.csv"
        assert main(["eval", "--ckpt", str(trained), "--data", str(ds_dir),
                     "--report", str(halved)]) == 0
        assert main(["eval", "--ckpt", str(trained), "--data", str(ds_dir),
                     "--dssim-halved", "false", "--report", str(full)]) == 0
        assert "1-ssim" in full.read_text().splitlines()[2]
        mean_h = halved.read_text().splitlines()[-1].split(",")
        mean_f = full.read_text().splitlines()[-1].split(",")
        assert float(mean_f[4]) == pytest.approx(2.0 * float(mean_h[4]),
                                                 abs=2e-6)
        assert float(mean_h[4]) > 0.0

    def test_bad_split_rejected_by_parser(self, ds_dir, trained):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--ckpt", str(trained), "--data", str(ds_dir),
                  "--split", "validation"])
        assert exc.value.code == 2


class TestAblate:
    def test_all_variants_reported(self, ds_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "iterations": 4, "warmup_iters": 2,
            "eval_every": 100, "prune_every": 100,
        }))
        out = tmp_path / "reports"
        code = main(["ablate", "--data", str(ds_dir), "--config", str(cfg),
                     "--seed", "1", "--out", str(out)])
        assert code == 0
        names = ["none", "constant", "pow", "exp", "neural", "neural_novis"]
        assert sorted(p.name for p in out.iterdir()) == sorted(
            f"{n}.json" for n in names)
        for name in names:
            report = json.loads((out / f"{name}.json").read_text())
            assert report["variant"] == name
            assert report["config"]["rng_seed"] == 1
            assert report["config"]["no_visibility"] == (
                name == "neural_novis")
            expected_variant = "neural" if name == "neural_novis" else name
            assert report["config"]["decay_variant"] == expected_variant
            assert report["summary"]["iterations"] == 4
            assert np.isfinite(report["final_eval"]["psnr"])
            assert len(report["final_eval"]["per_frame"]) == 3


class TestGradcheckAndMisc:
    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "all gradient suites passed" in out
        assert len(out.splitlines()) >= 4

    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip()
