import json

import numpy as np
import pytest
from conftest import fk_frame, planar_grid_argmin

from teledex import cli
from teledex.collection import load_env_config
from teledex.kinematics import load_model, scale_model_document
from teledex.retarget import HumanHandFrame, RetargetConfig, calibrate, write_frames


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def human_files(tmp_path, human, operator):
    static = tmp_path / "static.jsonl"
    write_frames(static, [fk_frame(human, np.zeros(human.dof))])
    motion = tmp_path / "motion.jsonl"
    write_frames(motion, operator.motion_frames())
    return static, motion


def test_calibrate_identity(capsys, tmp_path, human_files):
    static, motion = human_files
    out = tmp_path / "profile.json"
    code, stdout, _ = run(capsys, "calibrate", "--model", "human", "--static", static, "--motion", motion, "--out", out)
    assert code == 0 and "thumb" in stdout
    profile = json.loads(out.read_text())
    assert set(profile["scale"].values()) == {1.0}
    assert all(v == [0.0, 0.0, 0.0] for v in profile["root_offset"].values())
    assert set(profile["rho_min"]) == {"index", "middle", "ring", "little"}


def test_calibrate_half_scale(capsys, tmp_path, human, human_files):
    static, _ = human_files
    model = tmp_path / "half.json"
    model.write_text(json.dumps(scale_model_document(human.document, 0.5)))
    out = tmp_path / "profile.json"
    code, _, _ = run(capsys, "calibrate", "--model", model, "--static", static, "--out", out, "--json")
    assert code == 0
    assert all(s == pytest.approx(0.5, rel=1e-12) for s in json.loads(out.read_text())["scale"].values())


def test_calibrate_flat_motion(capsys, tmp_path, human_files):
    static, _ = human_files
    code, _, err = run(capsys, "calibrate", "--model", "human", "--static", static, "--motion", static,
                       "--out", tmp_path / "p.json")
    assert code == 2 and "rho_min == rho_max" in err


@pytest.fixture
def planar_setup(tmp_path, planar2):
    profile = calibrate(planar2, np.zeros(2), fk_frame(planar2, np.zeros(2)))
    profile_path = tmp_path / "profile.json"
    profile_path.write_text(json.dumps(profile.to_dict()))
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(RetargetConfig(1.0, 0.0, 0.0).to_dict()))
    return profile_path, config_path


def retarget(capsys, tmp_path, planar_setup, frames, name="traj"):
    profile, config = planar_setup
    src, dst = tmp_path / f"{name}.jsonl", tmp_path / f"{name}.out.jsonl"
    write_frames(src, frames)
    code, out, err = run(capsys, "retarget", "--model", "planar2", "--profile", profile, "--config", config,
                         "--frames", src, "--out", dst)
    rows = [json.loads(line) for line in dst.read_text().splitlines()] if dst.exists() else []
    return code, rows, err


def test_retarget_constant_input(capsys, tmp_path, planar2, planar_setup):
    frames = [fk_frame(planar2, [0.7, 1.1], t=0.04 * k) for k in range(5)]
    code, rows, _ = retarget(capsys, tmp_path, planar_setup, frames)
    assert code == 0 and len(rows) == 5
    assert all(np.allclose(r["theta"], rows[0]["theta"], atol=1e-9) for r in rows[1:])
    assert set(rows[0]["cost"]) == {"total", "align", "couple", "smooth"}


def test_retarget_sinusoid_matches_grid(capsys, tmp_path, planar2, planar_setup):
    times = 0.04 * np.arange(12)
    truth = [np.array([0.5 + 0.6 * np.sin(1.5 * t), 1.0 + 0.7 * np.sin(2.0 * t + 0.3)]) for t in times]
    code, rows, _ = retarget(capsys, tmp_path, planar_setup, [fk_frame(planar2, q, t) for q, t in zip(truth, times)])
    assert code == 0
    for row, q in zip(rows, truth):
        target = fk_frame(planar2, q)
        best, _ = planar_grid_argmin({j: target[(0, j)] for j in (1, 2)}, np.zeros(2), 0.0)
        assert np.all(np.abs(np.array(row["theta"]) - best) <= 2e-3)


def test_retarget_nan_frame(capsys, tmp_path, planar2, planar_setup):
    frames = [fk_frame(planar2, [0.2, 0.4], t=0.04 * k) for k in range(4)]
    frames[2] = HumanHandFrame(0.08, {k: np.full(3, np.nan) for k in frames[2].points})
    code, rows, err = retarget(capsys, tmp_path, planar_setup, frames)
    assert code == 1 and "line 3" in err
    assert len(rows) == 4 and rows[2]["cost"] is None
    assert rows[2]["theta"] == rows[1]["theta"]


def test_retarget_corrupt_line(capsys, tmp_path, planar_setup):
    profile, config = planar_setup
    src = tmp_path / "bad.jsonl"
    src.write_text('{"t": 0, "points": {}}\nnot json\n')
    code, _, err = run(capsys, "retarget", "--model", "planar2", "--profile", profile, "--frames", src,
                       "--out", tmp_path / "o.jsonl")
    assert code == 2 and ":2:" in err


def test_simulate_config_errors_write_nothing(capsys, tmp_path):
    out = tmp_path / "ds"
    code, _, err = run(capsys, "simulate", "--env", tmp_path / "missing.json", "--out", out, "--steps", 5)
    assert code == 2 and not out.exists()
    code, _, _ = run(capsys, "simulate", "--env", "ideal", "--out", out, "--steps", 0)
    assert code == 2 and not out.exists()
    code, _, _ = run(capsys, "simulate", "--env", "ideal", "--out", out, "--hand-model", "nope", "--steps", 5)
    assert code == 2 and not out.exists()


def test_simulate_then_validate_agree(capsys, tmp_path):
    out = tmp_path / "ds"
    code, stdout, _ = run(capsys, "simulate", "--env", "paper-like", "--episodes", 2, "--steps", 40,
                          "--seed", 3, "--out", out, "--json")
    assert code == 0
    sim = json.loads(stdout)
    code, stdout, _ = run(capsys, "validate", "--root", out, "--json")
    assert code == 0
    report = json.loads(stdout)
    assert report["failures"] == [] and report["episodes"] == 2 and report["total_timesteps"] == 80
    for key in ("sync_success_rate", "avg_sync_error_ms", "tp99_ms"):
        assert report[key] == pytest.approx(sim[key], abs=1e-9)
    code, text, _ = run(capsys, "validate", "--root", out)
    assert f"sync success {report['sync_success_rate']:.2f}%" in text
    assert f"avg {report['avg_sync_error_ms']:.2f} ms" in text


def test_simulate_direct_mode(capsys, tmp_path):
    doc = load_env_config("ideal").to_dict()
    doc["control_mode"] = "direct"
    doc["hand_model"] = "l10"
    env = tmp_path / "env.json"
    env.write_text(json.dumps(doc))
    code, stdout, _ = run(capsys, "simulate", "--env", env, "--steps", 20, "--out", tmp_path / "ds", "--json")
    assert code == 0
    meta = json.loads((tmp_path / "ds" / json.loads(stdout)["episodes"][0]["path"] / "metadata.json").read_text())
    assert meta["qpos_dim"] == 16


def test_run_config_file(capsys, tmp_path):
    run_config = tmp_path / "run.json"
    run_config.write_text(json.dumps({"env": "ideal", "steps": 3, "episodes": 1, "out": str(tmp_path / "a")}))
    code, _, _ = run(capsys, "simulate", "--run-config", run_config, "--out", tmp_path / "b")
    assert code == 0 and (tmp_path / "b").exists() and not (tmp_path / "a").exists()


def test_validate_detects_deleted_frame(capsys, tmp_path):
    out = tmp_path / "ds"
    assert run(capsys, "simulate", "--env", "ideal", "--episodes", 2, "--steps", 5, "--out", out)[0] == 0
    victim = next(out.rglob("*.ppm"))
    victim.unlink()
    code, stdout, _ = run(capsys, "validate", "--root", out, "--json")
    report = json.loads(stdout)
    assert code == 1 and len(report["failures"]) == 1 and report["episodes"] == 1


def test_validate_missing_root(capsys, tmp_path):
    code, _, err = run(capsys, "validate", "--root", tmp_path / "nothing")
    assert code == 2 and "not found" in err


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_bundled_models_load():
    assert load_model("human").dof == 15
