import json

import numpy as np
import pytest

from deformrec.cli import RunConfig, main, parse_frame_range
from deformrec.export import read_ply_counts
from deformrec.rastermap import RasterMap, read_rtf, write_rtf
from deformrec.simcam import SceneConfig, generate, scenario, write_dataset


def small_dataset(path, name="static", frames=2, width=16, height=16, seed=0):
    if name == "static":
        # the sheet must fill the view at 1 mm per pixel
        sheet = {"extent": (2.0 * width, 2.0 * height)}
        cfg = SceneConfig(width=width, height=height, frames=frames, sheet=sheet, name="static")
    else:
        cfg = scenario(name, frames=frames, seed=seed, width=width, height=height)
    write_dataset(generate(cfg), path, cfg)
    return cfg


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSimulate:
    def test_traction_thirty_frames(self, tmp_path):
        assert main(["simulate", "traction", "--frames", "30", "--out", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("frame_*"))) == 30
        assert json.loads((tmp_path / "manifest.json").read_text())["frames"] == 30

    def test_unknown_scenario(self, tmp_path, capsys):
        assert main(["simulate", "bogus", "--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        for name in ("traction", "palpation", "camera_pan", "occlusion", "rigid"):
            assert name in err

    def test_same_seed_identical(self, tmp_path):
        for d in ("a", "b"):
            assert main(["simulate", "palpation", "--frames", "3", "--seed", "7", "--out", str(tmp_path / d)]) == 0
        assert files(tmp_path / "a") == files(tmp_path / "b")

    def test_from_config_file(self, tmp_path):
        cfg = SceneConfig(width=12, height=10, frames=4, motion_script=[{"kind": "bend", "curvature_rate": 0.001}])
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert main(["simulate", str(path), "--frames", "2", "--out", str(tmp_path / "ds")]) == 0
        man = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert (man["frames"], man["width"], man["height"]) == (2, 12, 10)

    def test_strain_limit_is_an_input_error(self, tmp_path):
        cfg = SceneConfig(width=8, height=8, frames=3, motion_script=[{"kind": "uniaxial_stretch", "rate": 0.2}])
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert main(["simulate", str(path), "--out", str(tmp_path / "ds")]) == 2
        assert main(["simulate", str(path), "--allow-large-strain", "--out", str(tmp_path / "ds")]) == 0


class TestRun:
    def test_static_fixed_point(self, tmp_path):
        small_dataset(tmp_path / "ds")
        out = tmp_path / "out"
        assert main(["run", str(tmp_path / "ds"), "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert len(metrics["per_frame"]) == 2
        assert metrics["aggregate"]["non_occluded"]["rmse"] < 1e-3
        assert metrics["aggregate"]["occluded"] is None
        assert set(metrics["timing_ms"]) >= {"per_iteration", "mean_optimize_ms", "total_ms"}
        nv, nf = read_ply_counts(out / "frame_000001" / "mesh.ply")
        assert nv == 256 and nf == 2 * 15 * 15
        header = (out / "strain.csv").read_text().splitlines()[0]
        assert header == "frame,u,v,x,y,z,eps_uu,eps_vv,eps_uv,lambda_max,lambda_min"

    def test_downsample(self, tmp_path):
        small_dataset(tmp_path / "ds", width=256, height=256)
        out = tmp_path / "out"
        assert main(["run", str(tmp_path / "ds"), "--downsample", "4", "--out", str(out), "--no-ply"]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["per_frame"][0]["n_points"] == 64 * 64
        canon = read_rtf(out / "frame_000000" / "canonical.rtf")
        assert len(canon) == 64 * 64
        assert metrics["aggregate"]["non_occluded"]["rmse"] < 1e-3
        assert not (out / "frame_000000" / "mesh.ply").exists()

    def test_missing_flow(self, tmp_path, capsys):
        small_dataset(tmp_path / "ds")
        missing = tmp_path / "ds" / "frame_000001" / "flow.rtf"
        missing.unlink()
        assert main(["run", str(tmp_path / "ds"), "--out", str(tmp_path / "out")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_frame_range(self, tmp_path):
        small_dataset(tmp_path / "ds", frames=4)
        out = tmp_path / "out"
        assert main(["run", str(tmp_path / "ds"), "--frames", "1..2", "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob("frame_*")) == ["frame_000001", "frame_000002"]
        assert main(["run", str(tmp_path / "ds"), "--frames", "2..9", "--out", str(out)]) == 2

    def test_config_file_and_overrides(self, tmp_path):
        small_dataset(tmp_path / "ds")
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"input_dir": str(tmp_path / "ds"), "output_dir": str(tmp_path / "o"),
                                   "alpha": 50.0, "export": {"ply": False}}))
        assert main(["run", "--config", str(cfg), "--alpha", "120"]) == 0
        saved = json.loads((tmp_path / "o" / "run.json").read_text())["config"]
        assert saved["alpha"] == 120.0 and saved["ply"] is False

    @pytest.mark.parametrize("flag,value", [("--alpha", "0"), ("--strain-gate", "1.5"), ("--downsample", "0")])
    def test_invalid_settings(self, tmp_path, flag, value, capsys):
        small_dataset(tmp_path / "ds")
        assert main(["run", str(tmp_path / "ds"), flag, value, "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err

    def test_config_rejects_unknown_keys(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"input_dir": "x", "bogus": 1}))
        assert main(["run", "--config", str(cfg)]) == 2

    def test_reproducible_metrics(self, tmp_path):
        small_dataset(tmp_path / "ds", name="palpation", frames=4)
        payloads = []
        for d in ("a", "b"):
            assert main(["run", str(tmp_path / "ds"), "--out", str(tmp_path / d), "--no-ply"]) == 0
            m = json.loads((tmp_path / d / "metrics.json").read_text())
            m.pop("timing_ms")
            m.pop("config")  # differs by output directory
            for f in m["per_frame"]:
                f.pop("optimize_ms", None)
                f.pop("wall_ms", None)
            payloads.append(m)
        assert payloads[0] == payloads[1]
        assert files(tmp_path / "a" / "frame_000003") == files(tmp_path / "b" / "frame_000003")


class TestEval:
    def run_static(self, tmp_path, frames=2):
        small_dataset(tmp_path / "ds", frames=frames)
        assert main(["run", str(tmp_path / "ds"), "--out", str(tmp_path / "out"), "--no-ply"]) == 0
        return tmp_path / "ds", tmp_path / "out"

    def test_perfect_recovery(self, tmp_path, capsys):
        ds, out = self.run_static(tmp_path)
        assert main(["eval", str(out), str(ds)]) == 0
        result = json.loads((out / "eval.json").read_text())
        agg = result["aggregate"]["non_occluded"]
        assert agg["rmse"] < 1e-3 and agg["msd"] < 1e-3
        assert "non-occluded" in capsys.readouterr().out

    def test_constant_offset(self, tmp_path):
        ds, out = self.run_static(tmp_path)
        for f in out.glob("frame_*"):
            c = read_rtf(f / "canonical.rtf")
            vals = c.values.copy()
            vals[2] += 1.0
            write_rtf(RasterMap(c.domain, vals, c.mask), f / "canonical.rtf")
        assert main(["eval", str(out), str(ds), "--out", str(tmp_path / "e.json")]) == 0
        agg = json.loads((tmp_path / "e.json").read_text())["aggregate"]["non_occluded"]
        assert agg["msd"] == pytest.approx(1.0, abs=1e-4)
        assert agg["std"] == pytest.approx(0.0, abs=1e-4)

    def test_palpation_table_has_both_regions(self, tmp_path, capsys):
        small_dataset(tmp_path / "ds", name="palpation", frames=4, width=32, height=32)
        assert main(["run", str(tmp_path / "ds"), "--out", str(tmp_path / "out"), "--no-ply"]) == 0
        assert main(["eval", str(tmp_path / "out"), str(tmp_path / "ds")]) == 0
        agg = json.loads((tmp_path / "out" / "eval.json").read_text())["aggregate"]
        assert agg["non_occluded"]["n"] > 0 and agg["occluded"]["n"] > 0

    def test_frame_count_mismatch(self, tmp_path, capsys):
        ds, out = self.run_static(tmp_path, frames=3)
        for p in (out / "frame_000002").iterdir():
            p.unlink()
        assert main(["eval", str(out), str(ds)]) == 2
        assert "frame-count mismatch" in capsys.readouterr().err


def test_parse_frame_range():
    assert parse_frame_range("3..7") == (3, 7)
    assert parse_frame_range("..4") == (0, 4)
    assert parse_frame_range("2..") == (2, -1)
    assert parse_frame_range(None) is None


def test_run_config_validation():
    with pytest.raises(Exception, match="alpha"):
        RunConfig(input_dir="x", alpha=-1).validate()
    assert RunConfig(input_dir="x").validate().alpha == 200.0
    assert RunConfig(input_dir="x").strain_gate == pytest.approx(0.1)
    assert np.isclose(RunConfig(frames="1..2").frames, (1, 2)).all()
