import csv
import json

import numpy as np
import pytest

from sdfadv.cli import main
from sdfadv.geometry import Pose, from_object_frame
from sdfadv.io import load_scene, write_csv
from sdfadv.sdf import AnalyticFamily, sample_surface
from sdfadv.shapefit import default_pca, natural_codes

FAST = ["--n-iter", "3", "--min-points", "30"]


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["gen-scene", "--out", str(d / "scene.ply"), "--seed", "1"]) == 0
    return d / "scene.ply"


def test_gen_scene_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-scene", "--out", str(tmp_path / name / "s.ply"), "--seed", "5",
                     "--n-azimuth", "256", "--n-elevation", "16"]) == 0
    assert (tmp_path / "a/s.ply").read_bytes() == (tmp_path / "b/s.ply").read_bytes()
    assert (tmp_path / "a/s.sensors.json").read_bytes() == (tmp_path / "b/s.sensors.json").read_bytes()
    assert main(["gen-scene", "--out", str(tmp_path / "c/s.ply"), "--seed", "6",
                 "--n-azimuth", "256", "--n-elevation", "16"]) == 0
    assert (tmp_path / "a/s.ply").read_bytes() != (tmp_path / "c/s.ply").read_bytes()


def test_gen_scene_formats_agree(tmp_path):
    args = ["--seed", "2", "--n-azimuth", "128", "--n-elevation", "16"]
    assert main(["gen-scene", "--out", str(tmp_path / "s.csv"), *args]) == 0
    assert main(["gen-scene", "--out", str(tmp_path / "s.ply"), "--ascii", *args]) == 0
    a, b = load_scene(tmp_path / "s.csv"), load_scene(tmp_path / "s.ply")
    assert a.points.tobytes() == b.points.tobytes()
    assert json.loads((tmp_path / "config.resolved.json").read_text())["seed"] == 2


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["gen-scene"]) == 2
    assert main(["attack", "--mode", "shape"]) == 2
    assert "needs --scene" in capsys.readouterr().err


def test_bad_values_are_usage_errors(tmp_path, scene_file):
    assert main(["--threads", "0", "gen-scene", "--out", str(tmp_path / "x.ply")]) == 2
    assert main(["attack", "--scene", str(scene_file), "--out-dir", str(tmp_path), "--alpha", "-1"]) == 2
    (tmp_path / "cfg.json").write_text(json.dumps({"n_itr": 3}))
    assert main(["attack", "--config", str(tmp_path / "cfg.json"), "--scene", str(scene_file),
                 "--out-dir", str(tmp_path)]) == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        from sdfadv.cli import build_parser
        build_parser().parse_args(["attack", "--help"])
    text = capsys.readouterr().out
    for snippet in ("default: 40", "default: 0.01", "default: 300", "default: 4.0"):
        assert snippet in text


def test_config_file_then_flags(tmp_path, scene_file):
    (tmp_path / "cfg.json").write_text(json.dumps({"n_iter": 2, "alpha": 0.5, "min_points": 30}))
    out = tmp_path / "run"
    assert main(["attack", "--config", str(tmp_path / "cfg.json"), "--alpha", "0",
                 "--scene", str(scene_file), "--out-dir", str(out), "--lams", "1"]) == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["n_iter"] == 2 and resolved["alpha"] == 0.0 and resolved["min_points"] == 30


def test_zero_step_keeps_loss_constant(tmp_path, scene_file):
    out = tmp_path / "run"
    assert main(["attack", "--scene", str(scene_file), "--out-dir", str(out), "--alpha", "0", *FAST]) == 0
    with open(out / "trace.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) >= 4 and len({r["loss"] for r in rows}) == 1
    res = json.loads((out / "result.json").read_text())
    assert res["final_score"] == res["initial_score"]
    assert all((out / name).exists() for name in ("initial.ply", "final.ply", "config.resolved.json"))


def test_pose_attack_then_verify(tmp_path, scene_file):
    out = tmp_path / "pose"
    # a small step keeps every iterate feasible (large steps tilt the car off its contact points)
    assert main(["attack", "--scene", str(scene_file), "--out-dir", str(out), "--mode", "pose",
                 "--alpha", "0.001", *FAST]) == 0
    assert main(["verify", "--result", str(out / "result.json")]) == 0
    res = json.loads((out / "result.json").read_text())
    res["final_pose"][0] += 10.0  # move far outside the 4 m disc
    (out / "tampered.json").write_text(json.dumps(res))
    assert main(["verify", "--result", str(out / "tampered.json")]) == 1


def test_infeasible_start_exit_code(tmp_path, scene_file):
    # a pose whose body is buried 1 m below the ground fails the overlap check
    out = tmp_path / "bad"
    assert main(["attack", "--scene", str(scene_file), "--out-dir", str(out), "--pose",
                 "25", "0", "-1", "0", "0", "0", *FAST]) == 3
    assert json.loads((out / "result.json").read_text())["error"] == "InfeasibleStart"


def _result(path, family, **scores):
    path.write_text(json.dumps({"family": family, "scores": scores}))


def test_eval_auc(tmp_path, capsys):
    _result(tmp_path / "r1.json", "car", baseline=0.6, adversarial=0.2)
    assert main(["eval", "--results", str(tmp_path / "r*.json"), "--out-dir", str(tmp_path / "ev")]) == 0
    table = json.loads((tmp_path / "ev/auc.json").read_text())["auc"]
    assert abs(table["car"]["baseline"] - 0.6) <= 1e-3
    assert abs(table["car"]["adversarial"] - 0.2) <= 1e-3
    assert (tmp_path / "ev/curve_car_baseline.csv").read_text().startswith("threshold,recall\n")


def test_eval_without_matches_is_usage_error(tmp_path):
    assert main(["eval", "--results", str(tmp_path / "none*.json"), "--out-dir", str(tmp_path)]) == 2


def test_gradcheck_and_negative_control(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "gc.json")]) == 0
    report = json.loads((tmp_path / "gc.json").read_text())
    assert report["passed"] and len(report["suites"]) == 8
    assert main(["gradcheck", "--inject-grad-bug"]) == 1
    assert "car_decoder_latent" in capsys.readouterr().err


def test_reconstruct_command(tmp_path):
    car = AnalyticFamily.car()
    z_true = natural_codes(default_pca(car), 1, seed=4)[0]
    pose = Pose(20.0, 3.0, 0.2, 1.0, 0.0, 0.0)
    pts = from_object_frame(sample_surface(car, z_true, 150), pose)
    write_csv(tmp_path / "obj.csv", pts, np.zeros(len(pts), dtype=int))
    assert main(["reconstruct", "--points", str(tmp_path / "obj.csv"), "--pose",
                 *map(str, pose.as_vector()), "--out", str(tmp_path / "z.json")]) == 0
    out = json.loads((tmp_path / "z.json").read_text())
    assert out["objective"] < 1e-6
    assert np.linalg.norm(np.array(out["z"]) - z_true) < 0.05
    write_csv(tmp_path / "few.csv", pts[:5], np.zeros(5, dtype=int))
    assert main(["reconstruct", "--points", str(tmp_path / "few.csv"), "--pose", *["0"] * 6,
                 "--out", str(tmp_path / "z2.json")]) == 2
