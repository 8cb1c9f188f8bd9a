import csv
import json

import jsonschema
import numpy as np
import pytest

from lidarsim import io
from lidarsim.cli import main
from lidarsim.geometry import Pose
from lidarsim.metrics import REPORT_SCHEMA, random_raydrop
from lidarsim.objects import ObjectBank
from lidarsim.points import PointCloud
from lidarsim.polar import CH_OCCUPANCY
from lidarsim.raydrop import RaydropModel


@pytest.fixture(scope="module")
def street(tmp_path_factory):
    d = tmp_path_factory.mktemp("street")
    assert main(["synth", "street", "--out", str(d), "--count", "2", "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def street_run(street, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    assert main(["simulate", str(street / "scenario.json"), "--bank", str(street / "bank"), "--out", str(out)]) == 0
    return out


class TestUsage:
    def test_no_command(self):
        assert main([]) == 2

    def test_build_map_needs_sweeps(self, tmp_path):
        assert main(["build-map", "--out", str(tmp_path / "m.lsrf")]) == 2

    def test_train_zero_pairs(self, tmp_path):
        assert main(["train-raydrop", "--out", str(tmp_path / "m.lrdm")]) == 2

    def test_unknown_synth_kind(self, tmp_path):
        assert main(["synth", "nothing", "--out", str(tmp_path)]) == 2


class TestBuildMap:
    def test_plane_sweeps_roundtrip(self, tmp_path, capsys):
        assert main(["synth", "plane-sweeps", "--out", str(tmp_path), "--count", "3"]) == 0
        sweeps = sorted(str(p) for p in tmp_path.glob("sweep_*.lswp"))
        assert len(sweeps) == 3
        capsys.readouterr()
        assert main(["build-map", *sweeps, "--out", str(tmp_path / "m.lsrf")]) == 0
        assert "surfels:" in capsys.readouterr().out
        raw = (tmp_path / "m.lsrf").read_bytes()
        surfels = io.read_surfels(tmp_path / "m.lsrf")
        assert len(surfels) > 0 and io.encode_surfels(surfels) == raw

    def test_corrupt_magic(self, tmp_path, capsys):
        (tmp_path / "bad.lswp").write_bytes(b"JUNK" + bytes(40))
        assert main(["build-map", str(tmp_path / "bad.lswp"), "--out", str(tmp_path / "m.lsrf")]) == 3
        assert "bad magic" in capsys.readouterr().err


class TestBuildObject:
    def test_box(self, tmp_path):
        assert main(["synth", "box-object", "--out", str(tmp_path), "--count", "5", "--seed", "2"]) == 0
        sweeps = sorted(str(p) for p in tmp_path.glob("sweep_*.lswp"))
        assert main(["build-object", *sweeps, "--labels", str(tmp_path / "labels.json"),
                     "--out-dir", str(tmp_path / "bank")]) == 0
        asset = ObjectBank.open(tmp_path / "bank")["box"]
        lo, hi = asset.surfels.bounds()
        np.testing.assert_allclose(hi - lo, asset.dims, rtol=0.10)

    def test_ten_points_is_quality_error(self, tmp_path):
        pts = PointCloud.from_positions(np.random.default_rng(0).uniform(-0.5, 0.5, (10, 3)), laser_id=0)
        io.write_sweep(tmp_path / "s.lswp", io.Sweep(pts, Pose()))
        (tmp_path / "l.json").write_text(json.dumps([{"t": 0.0, "center": [0, 0, 0], "heading": 0.0,
                                                      "dims": [2, 2, 2]}]))
        assert main(["build-object", str(tmp_path / "s.lswp"), "--labels", str(tmp_path / "l.json"),
                     "--out-dir", str(tmp_path / "bank")]) == 4


class TestSimulate:
    def test_outputs_and_counts(self, street_run):
        grid = io.read_grid(f"{street_run}.grid.lgrd")
        mask = io.read_grid(f"{street_run}.mask.lgrd")
        sweep = io.read_sweep(f"{street_run}.lswp")
        assert grid.shape == (8, 64, 2048)
        np.testing.assert_array_equal(mask[0], grid[CH_OCCUPANCY])
        assert len(sweep.points) == int(grid[CH_OCCUPANCY].sum()) > 0

    def test_deterministic(self, street, street_run, tmp_path):
        out = tmp_path / "b"
        assert main(["simulate", str(street / "scenario.json"), "--bank", str(street / "bank"), "--out", str(out)]) == 0
        for ext in ("grid.lgrd", "mask.lgrd", "lswp", "ply"):
            assert (tmp_path / f"b.{ext}").read_bytes() == street_run.parent.joinpath(f"a.{ext}").read_bytes()

    def test_constant_model_ratio(self, street, street_run, tmp_path):
        RaydropModel.constant(0.9).save(tmp_path / "c.lrdm")
        out = tmp_path / "c"
        assert main(["simulate", str(street / "scenario.json"), "--bank", str(street / "bank"),
                     "--model", str(tmp_path / "c.lrdm"), "--out", str(out)]) == 0
        occ = io.read_grid(f"{street_run}.grid.lgrd")[CH_OCCUPANCY].sum()
        assert occ >= 100_000
        ratio = len(io.read_sweep(f"{out}.lswp").points) / occ
        assert 0.89 <= ratio <= 0.91
        assert (tmp_path / "c.prob.lgrd").exists()

    def test_unresolved_asset(self, street, tmp_path):
        doc = json.loads((street / "scenario.json").read_text())
        doc["map"] = str(street / doc["map"])
        doc["actors"][0]["asset"] = "truck"
        (tmp_path / "s.json").write_text(json.dumps(doc))
        assert main(["simulate", str(tmp_path / "s.json"), "--bank", str(street / "bank"),
                     "--out", str(tmp_path / "x")]) == 5

    def test_missing_map(self, street, tmp_path):
        doc = json.loads((street / "scenario.json").read_text())
        doc["map"] = "nowhere.lsrf"
        (tmp_path / "s.json").write_text(json.dumps(doc))
        assert main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path / "x")]) == 5


class TestTrainRaydrop:
    def test_train_and_log(self, tmp_path):
        d = tmp_path / "fx"
        assert main(["synth", "raydrop", "--out", str(d), "--count", "1"]) == 0
        (tmp_path / "cfg.json").write_text(json.dumps({"step_size": 0.01, "epochs": 2, "window": 1}))
        model = tmp_path / "m.lrdm"
        assert main(["train-raydrop", "--sim", str(d / "sim_000.lgrd"), "--real", str(d / "real_000.lswp"),
                     "--config", str(tmp_path / "cfg.json"), "--out", str(model)]) == 0
        back = RaydropModel.load(model)
        assert back.to_bytes() == model.read_bytes()
        with open(f"{model}.loss.csv") as f:
            rows = list(csv.DictReader(f))
        epochs = [int(r["epoch"]) for r in rows]
        assert epochs == sorted(epochs) == list(range(3))
        assert float(rows[-1]["loss"]) < float(rows[0]["loss"])

    def test_mismatched_pairs(self, tmp_path):
        assert main(["train-raydrop", "--sim", "a.lgrd", "b.lgrd", "--real", "a.lswp",
                     "--out", str(tmp_path / "m")]) == 2

    def test_bad_config(self, tmp_path):
        (tmp_path / "cfg.json").write_text('{"nope": 1}')
        assert main(["train-raydrop", "--sim", "a.lgrd", "--real", "a.lswp", "--config", str(tmp_path / "cfg.json"),
                     "--out", str(tmp_path / "m")]) == 3


class TestEval:
    def test_self(self, street_run, tmp_path):
        rep = tmp_path / "r.json"
        assert main(["eval", "--sim", f"{street_run}.mask.lgrd", "--real", f"{street_run}.mask.lgrd",
                     "--report", str(rep)]) == 0
        doc = json.loads(rep.read_text())
        jsonschema.validate(doc, REPORT_SCHEMA)
        assert doc["occupancy"]["iou"] == 1.0 and doc["point_count_ratio"] == 1.0

    def test_random_drop_ratio(self, street_run, tmp_path):
        occ = io.read_grid(f"{street_run}.mask.lgrd")[0]
        io.write_grid(tmp_path / "real.lgrd", random_raydrop(occ, 0.1, 4))
        (tmp_path / "k.json").write_text('{"R_plus": ["a", "b"], "R_minus": ["c"], "S_plus": ["a"], "S_minus": ["b", "c"]}')
        rep = tmp_path / "r.json"
        assert main(["eval", "--sim", f"{street_run}.mask.lgrd", "--real", str(tmp_path / "real.lgrd"),
                     "--agreement", str(tmp_path / "k.json"), "--report", str(rep)]) == 0
        doc = json.loads(rep.read_text())
        assert doc["point_count_ratio"] == pytest.approx(0.9, abs=0.005)
        assert doc["occupancy"]["precision"] == pytest.approx(0.9, abs=0.005)
        assert doc["detection_agreement"] == 2 / 3

    def test_real_sweep_input(self, street_run, tmp_path):
        rep = tmp_path / "r.json"
        assert main(["eval", "--sim", f"{street_run}.grid.lgrd", "--real", f"{street_run}.lswp",
                     "--report", str(rep)]) == 0
        assert json.loads(rep.read_text())["point_count_ratio"] == 1.0

    def test_bad_input(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"ZZZZ")
        assert main(["eval", "--sim", str(tmp_path / "x.bin"), "--real", str(tmp_path / "x.bin"),
                     "--report", str(tmp_path / "r.json")]) == 3
