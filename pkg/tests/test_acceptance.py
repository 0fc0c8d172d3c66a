"""Acceptance criteria. Each test carries a ``criterion`` marker; conftest prints a pass/fail table."""

import contextlib
import io
import json
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import fk_frame, planar_grid_argmin
from hypothesis import given, settings
from hypothesis import strategies as st

from teledex import cli
from teledex.collection import SimulatedEnv, load_env_config, run_episode
from teledex.kinematics import forward_keypoints
from teledex.pipeline import calibrate_for
from teledex.retarget import (
    CalibrationProfile,
    HumanHandFrame,
    RetargetConfig,
    align_cost,
    calibrate,
    solve_retarget,
    total_cost,
    total_cost_gradient,
    transform_keypoints,
)
from teledex.store import (
    IntegrityError,
    SessionMetadata,
    TelemetryTable,
    read_episode,
    validate_dataset,
    verify_episode,
    write_episode,
)
from teledex.timesync import SyncPolicy, validate

pytestmark = pytest.mark.acceptance


def run_cli(*argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue()


# -- 1 ---------------------------------------------------------------------


def _random_triple(rng, model, human, operator):
    def uniform(m):
        return rng.uniform(m.lower, m.upper)

    config = RetargetConfig(
        alpha_align=10 ** rng.uniform(1, 3),
        alpha_couple=10 ** rng.uniform(1, 3) if len(model.fingers) > 1 else 0.0,
        alpha_smooth=10 ** rng.uniform(-3, -1),
    )
    if len(model.fingers) == 1:
        # planar finger: human keypoints are a noisy, rescaled copy of the robot's
        static = fk_frame(model, uniform(model)).scaled(rng.uniform(0.7, 1.3))
        profile = calibrate(model, uniform(model), static)
        pts = forward_keypoints(model, uniform(model))
        frame = HumanHandFrame(0.0, {k: p + rng.normal(0, 0.005, 3) for k, p in pts.items()})
    else:
        static = operator.static_frame().scaled(rng.uniform(0.8, 1.2))
        profile = calibrate(model, np.zeros(model.dof), static, operator.motion_frames())
        frame = fk_frame(human, uniform(human))
    return uniform(model), uniform(model), frame, profile, config


@pytest.mark.criterion(1, "analytic gradient matches central differences (100 triples)")
def test_gradient_oracle(planar2, o6, l10, human, operator):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    h = 1e-6
    worst = 0.0
    for n in range(100):
        model = (planar2, o6, l10)[n % 3]
        theta, prev, frame, profile, config = _random_triple(rng, model, human, operator)
        pprime = transform_keypoints(profile, frame)
        grad = total_cost_gradient(model, theta, prev, pprime, frame, profile, config)
        fd = np.empty(model.dof)
        for k in range(model.dof):
            e = np.zeros(model.dof)
            e[k] = h
            up = total_cost(model, theta + e, prev, pprime, frame, profile, config).total
            down = total_cost(model, theta - e, prev, pprime, frame, profile, config).total
            fd[k] = (up - down) / (2 * h)
        # norm-wise relative error; per-component ratios are meaningless for near-zero entries
        worst = max(worst, np.abs(grad - fd).max() / np.abs(fd).max())
    assert worst < 1e-5
    assert time.perf_counter() - start < 10.0


# -- 2 ---------------------------------------------------------------------


@pytest.mark.criterion(2, "solver agrees with exhaustive grid search on the planar finger")
def test_solver_vs_grid(planar2):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    profile = calibrate(planar2, np.zeros(2), fk_frame(planar2, np.zeros(2)))
    alpha_smooth = 1e-5
    config = RetargetConfig(alpha_align=1.0, alpha_couple=0.0, alpha_smooth=alpha_smooth)
    for _ in range(25):
        target = fk_frame(planar2, rng.uniform(planar2.lower, planar2.upper))
        prev = rng.uniform(planar2.lower, planar2.upper)
        theta, report = solve_retarget(planar2, profile, config, target, prev)
        best_theta, best_cost = planar_grid_argmin(
            {j: target[(0, j)] for j in (1, 2)}, prev, alpha_smooth
        )
        assert np.all(np.abs(theta - best_theta) <= 2e-3), (theta, best_theta)
        assert report.final_cost <= best_cost + 1e-8
    assert time.perf_counter() - start < 60.0


# -- 3 ---------------------------------------------------------------------


@pytest.mark.criterion(3, "identity retargeting reaches alignment cost below 1e-8 m^2")
def test_identity_retarget(human, operator, grasp_frames):
    profile = calibrate(human, operator.open, fk_frame(human, operator.open), operator.motion_frames())
    assert set(profile.scale.values()) == {1.0}
    assert all(np.all(d == 0.0) for d in profile.root_offset.values())
    config = RetargetConfig(alpha_align=1.0, alpha_couple=0.5, alpha_smooth=0.0)
    keys = config.alignment_keys(human)
    theta = profile.theta0
    worst = 0.0
    for frame in grasp_frames:
        theta, _ = solve_retarget(human, profile, config, frame, theta)
        worst = max(worst, align_cost(human, theta, transform_keypoints(profile, frame), keys))
    assert worst < 1e-8


# -- 4 ---------------------------------------------------------------------


@pytest.mark.criterion(4, "keypoint transform reproduces the chained hand example exactly")
def test_transform_example():
    frame = HumanHandFrame(
        0.0, {(0, 0): np.zeros(3), (0, 1): np.array([0.04, 0, 0]), (0, 2): np.array([0.07, 0, 0])}
    )
    profile = CalibrationProfile(
        theta0=np.zeros(1),
        pbar=frame,
        scale={(0, 0): 0.5, (0, 1): 0.5},
        root_offset={0: np.array([0.01, 0.0, 0.0])},
    )
    out = transform_keypoints(profile, frame)
    assert out[(0, 0)].tolist() == [0.0, 0.0, 0.0]
    assert out[(0, 1)].tolist() == [0.03, 0.0, 0.0]
    assert out[(0, 2)].tolist() == [0.045, 0.0, 0.0]


# -- 5 ---------------------------------------------------------------------


def _track(model, profile, config, frames):
    theta = profile.theta0
    path, align = [theta], []
    keys = config.alignment_keys(model)
    for frame in frames:
        theta, _ = solve_retarget(model, profile, config, frame, theta)
        path.append(theta)
        align.append(align_cost(model, theta, transform_keypoints(profile, frame), keys))
    motion = float((np.diff(np.array(path), axis=0) ** 2).sum())
    return motion, float(np.mean(align))


@pytest.mark.criterion(5, "smoothing lowers joint motion and costs under 20% alignment")
@pytest.mark.parametrize("hand", ["o6", "l10"])
def test_smoothing_tradeoff(hand, request, human, grasp_frames):
    model = request.getfixturevalue(hand)
    profile = calibrate_for(model, human)
    # metres-squared alignment needs weight to compete with radian-squared smoothing
    rough = RetargetConfig(alpha_align=100.0, alpha_couple=50.0, alpha_smooth=0.0)
    smooth = RetargetConfig(alpha_align=100.0, alpha_couple=50.0, alpha_smooth=0.1)
    motion0, align0 = _track(model, profile, rough, grasp_frames)
    motion1, align1 = _track(model, profile, smooth, grasp_frames)
    assert motion1 < motion0
    assert align1 < 1.2 * align0


# -- 6 and 10 --------------------------------------------------------------


@pytest.fixture(scope="module")
def paper_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("paper_like")
    start = time.perf_counter()
    code, stdout = run_cli(
        "simulate", "--env", "paper-like", "--episodes", 20, "--steps", 491, "--seed", 0, "--out", out, "--json"
    )
    return code, json.loads(stdout), out, time.perf_counter() - start


@pytest.mark.criterion(6, "paper-like jitter: success >= 99%, avg 40-70 ms, tp99 < 70 ms")
def test_sync_metrics_band(paper_run):
    code, report, out, elapsed = paper_run
    assert code == 0
    assert len(report["episodes"]) == 20
    assert report["sync_success_rate"] >= 99.0
    assert 40.0 <= report["avg_sync_error_ms"] <= 70.0
    assert report["tp99_ms"] < 70.0
    # the on-disk dataset must say the same thing
    disk = validate_dataset(out)
    assert disk.failures == []
    assert disk.sync_success_rate == report["sync_success_rate"]
    assert disk.avg_sync_error_ms == pytest.approx(report["avg_sync_error_ms"], abs=1e-9)
    assert disk.tp99_ms == report["tp99_ms"]
    assert elapsed < 120.0


@pytest.mark.criterion(10, "491 steps give 19.64 s and qpos_dim 12")
def test_episode_accounting(paper_run):
    _, report, out, _ = paper_run
    for ep in report["episodes"]:
        meta = json.loads((out / ep["path"] / "metadata.json").read_text())
        assert meta["timesteps"] == 491
        assert meta["duration_sec"] == 19.64
        assert meta["qpos_dim"] == 12
        assert meta["total_dof"] == 12
        assert meta["control_freq_hz"] == 25.0
        assert meta["dt"] == 0.04


# -- 7 ---------------------------------------------------------------------

_ticks = st.integers(min_value=0, max_value=2**20)
_DYADIC = 2.0**-12


@pytest.mark.criterion(7, "timesync examples and properties")
def test_timesync_examples():
    policy = SyncPolicy()
    ok = validate(policy, 10.10, {"arm": 10.00, "hand": 10.05, "cam": 10.08})
    assert ok.is_valid and ok.failure is None
    # 10.08 - 10.00 is 0.08000000000000007 in binary floating point
    assert ok.max_diff == pytest.approx(0.08, abs=1e-15)
    stale = validate(policy, 12.00, {"arm": 10.00, "hand": 11.99})
    assert not stale.is_valid and str(stale.failure) == "stale(arm)"
    same = validate(policy, 5.0, {"arm": 5.0, "hand": 5.0, "cam": 5.0})
    assert same.is_valid and same.max_diff == 0.0


@pytest.mark.criterion(7, "timesync examples and properties")
@settings(max_examples=1000, deadline=None)
@given(
    ticks=st.dictionaries(st.sampled_from(["arm", "hand", "cam", "tactile", "imu"]), _ticks, min_size=1),
    now=_ticks,
    tol=st.integers(1, 4096),
    extra=st.integers(0, 4096),
)
def test_monotone_tolerance(ticks, now, tol, extra):
    stamps = {k: v * _DYADIC for k, v in ticks.items()}
    window = 8192 * _DYADIC
    tight = validate(SyncPolicy(window, tol * _DYADIC), now * _DYADIC, stamps)
    loose = validate(SyncPolicy(window, (tol + extra) * _DYADIC), now * _DYADIC, stamps)
    if tight.is_valid:
        assert loose.is_valid


@pytest.mark.criterion(7, "timesync examples and properties")
@settings(max_examples=1000, deadline=None)
@given(
    ticks=st.dictionaries(st.sampled_from(["arm", "hand", "cam", "tactile", "imu"]), _ticks, min_size=1),
    now=_ticks,
    shift=st.integers(-(2**20), 2**20),
)
def test_shift_invariance(ticks, now, shift):
    # dyadic times keep every addition exact, so the comparison can be strict
    stamps = {k: v * _DYADIC for k, v in ticks.items()}
    policy = SyncPolicy(0.5, 0.1)
    a = validate(policy, now * _DYADIC, stamps)
    b = validate(policy, (now + shift) * _DYADIC, {k: v + shift * _DYADIC for k, v in stamps.items()})
    assert (a.is_valid, a.max_diff, a.failure) == (b.is_valid, b.max_diff, b.failure)
    assert b.checked_at - a.checked_at == shift * _DYADIC


# -- 8 ---------------------------------------------------------------------


def _random_episode(seed, steps=100):
    env_config = load_env_config("paper-like")
    env_config.seed = seed
    env = SimulatedEnv(env_config)
    rng = np.random.default_rng(seed)
    actions = rng.uniform(env.lower, env.upper, size=(steps, env.dof))
    return run_episode(env, lambda k, now, obs: actions[k], steps)


@pytest.mark.criterion(8, "storage round-trip is bit-exact and every byte is checksummed")
def test_storage_roundtrip_and_mutation(tmp_path):
    rng = np.random.default_rng(11)
    for seed in range(5):
        buffer = _random_episode(seed)
        meta = SessionMetadata.for_buffer(buffer, f"episode_{seed:06d}", "session_roundtrip")
        directory = tmp_path / meta.session_id / meta.episode_id
        write_episode(buffer, meta, directory)

        table, meta_back, _ = read_episode(directory)
        expected = TelemetryTable.from_buffer(buffer)
        for (name, want), (_, got) in zip(expected.columns(), table.columns()):
            assert want.dtype.kind == got.dtype.kind and want.tobytes() == got.tobytes(), name
        assert meta_back.to_dict() == meta.to_dict()

        files = sorted(p for p in directory.rglob("*") if p.is_file())
        frames = [p for p in files if "frames" in p.parts]
        targets = [p for p in files if "frames" not in p.parts] + list(rng.choice(frames, 2, replace=False))
        for path in targets:
            original = path.read_bytes()
            for pos in {0, len(original) - 1, int(rng.integers(len(original)))}:
                mutated = bytearray(original)
                mutated[pos] ^= 0xFF
                path.write_bytes(bytes(mutated))
                with pytest.raises(IntegrityError):
                    verify_episode(directory)
                path.write_bytes(original)
        verify_episode(directory)


# -- 9 ---------------------------------------------------------------------


@pytest.mark.criterion(9, "identical simulate runs give identical manifest checksums")
def test_simulate_determinism(tmp_path):
    manifests = []
    for name in ("a", "b"):
        code, _ = run_cli("simulate", "--env", "paper-like", "--episodes", 2, "--steps", 60, "--seed", 5,
                          "--out", tmp_path / name)
        assert code == 0
        root = tmp_path / name
        manifests.append({
            p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("manifest.json"))
        })
    assert len(manifests[0]) == 2
    assert manifests[0] == manifests[1]
    for rel, raw in manifests[0].items():
        for entry in json.loads(raw)["files"]:
            a = (tmp_path / "a" / Path(rel).parent / entry["path"]).read_bytes()
            b = (tmp_path / "b" / Path(rel).parent / entry["path"]).read_bytes()
            assert a == b
