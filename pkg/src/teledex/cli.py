"""Command-line entry point: calibrate, retarget, simulate, validate.

Exit codes: 0 success, 1 a frame or episode failed its checks, 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .collection import load_env_config
from .kinematics import ModelError, load_model
from .pipeline import RunConfig, load_retarget_config, simulate
from .retarget import (
    CalibrationProfile,
    NonFiniteInputError,
    RetargetConfig,
    RetargetError,
    calibrate,
    iter_frames,
    read_frames,
    solve_retarget,
    total_cost,
    transform_keypoints,
)
from .store import StoreError, summarize, validate_dataset

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _fmt(v, unit: str = "") -> str:
    return "n/a" if v is None else f"{v:.2f}{unit}"


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    static = read_frames(args.static)
    if not static:
        raise UsageError(f"{args.static}: no frames")
    motion = read_frames(args.motion) if args.motion else []
    theta0 = np.zeros(model.dof) if args.theta0 is None else np.asarray(json.loads(args.theta0), dtype=float)
    profile = calibrate(model, theta0, static[0], motion)
    Path(args.out).write_text(_dumps(profile.to_dict()) + "\n")
    if args.json:
        print(_dumps(profile.to_dict()))
        return EXIT_OK
    for f in model.fingers:
        scales = " ".join(f"{s:.4f}" for s in profile.segments(f.index))
        delta = " ".join(f"{d:+.4f}" for d in profile.root_offset[f.index])
        band = ""
        if f.index in profile.rho_min:
            band = f"  rho [{profile.rho_min[f.index]:.4f}, {profile.rho_max[f.index]:.4f}] m"
        print(f"{f.name:>6}: s = {scales}  delta = ({delta}) m{band}")
    print(f"profile written to {args.out}")
    return EXIT_OK


def cmd_retarget(args) -> int:
    model = load_model(args.model)
    profile = CalibrationProfile.from_dict(json.loads(Path(args.profile).read_text()))
    config = RetargetConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else RetargetConfig()
    frames = list(iter_frames(args.frames))
    theta = profile.theta0.copy()
    rejected = []
    with open(args.out, "w") as fh:
        for lineno, frame in frames:
            try:
                prev = theta
                theta, _ = solve_retarget(model, profile, config, frame, prev)
                pprime = transform_keypoints(profile, frame)
                cost = total_cost(model, theta, prev, pprime, frame, profile, config).to_dict()
            except NonFiniteInputError as exc:
                # hold the previous solution so the output stays one row per input frame
                rejected.append({"line": lineno, "error": str(exc)})
                cost = None
            fh.write(json.dumps({"t": frame.timestamp, "theta": [float(v) for v in theta], "cost": cost},
                                sort_keys=True) + "\n")
    summary = {"frames": len(frames), "rejected": rejected, "out": args.out}
    if args.json:
        print(_dumps(summary))
    else:
        print(f"retargeted {len(frames)} frames to {args.out}")
        for r in rejected:
            print(f"rejected line {r['line']}: {r['error']}", file=sys.stderr)
    return EXIT_FAILED if rejected else EXIT_OK


def _run_config(args) -> RunConfig:
    doc = json.loads(Path(args.run_config).read_text()) if args.run_config else {}
    for key in ("env", "retarget_config", "hand_model", "out", "episodes", "steps", "seed", "session_id"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    return RunConfig.from_dict(doc)


def cmd_simulate(args) -> int:
    run = _run_config(args)
    # load and check everything before anything is written
    env = load_env_config(run.env)
    if run.hand_model is not None:
        env = replace(env, hand_model=run.hand_model)
    load_model(env.hand_model)
    load_model(env.human_model)
    config = load_retarget_config(env, run.retarget_config)
    results = simulate(run, env, config)
    rate, avg, tp99 = summarize(
        np.concatenate([r.is_valid for r in results]), np.concatenate([r.max_diff for r in results])
    )
    report = {
        "episodes": [r.to_dict() for r in results],
        "sync_success_rate": rate,
        "avg_sync_error_ms": avg,
        "tp99_ms": tp99,
        "out": run.out,
    }
    if args.json:
        print(_dumps(report))
        return EXIT_OK
    for r in results:
        print(
            f"{r.path}: {r.duration_sec:.2f} s, {r.timesteps} steps, sync {r.sync_success_rate:.2f}%, "
            f"avg {_fmt(r.avg_sync_error_ms, ' ms')}, tp99 {_fmt(r.tp99_ms, ' ms')}"
        )
    print(f"overall: sync {rate:.2f}%, avg {_fmt(avg, ' ms')}, tp99 {_fmt(tp99, ' ms')}")
    return EXIT_OK


def cmd_validate(args) -> int:
    report = validate_dataset(args.root)
    if args.json:
        print(_dumps(report.to_dict()))
    else:
        print(f"episodes: {report.episodes}, timesteps: {report.total_timesteps}")
        if report.sync_success_rate is not None:
            print(
                f"sync success {report.sync_success_rate:.2f}%, avg {_fmt(report.avg_sync_error_ms, ' ms')}, "
                f"tp99 {_fmt(report.tp99_ms, ' ms')}"
            )
        for f in report.failures:
            print(f"FAILED {f['episode']}: {f['error']}")
    return EXIT_FAILED if report.failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teledex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = common(sub.add_parser("calibrate", help="compute a calibration profile"))
    p.add_argument("--model", required=True, help="bundled model name or model JSON path")
    p.add_argument("--static", required=True, help="JSON-lines file; the first frame is the static pose")
    p.add_argument("--motion", help="JSON-lines grasp motion for the proximity bands")
    p.add_argument("--theta0", help="calibration pose as a JSON list (default zeros)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = common(sub.add_parser("retarget", help="retarget a recorded human trajectory"))
    p.add_argument("--model", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--config", help="retarget config JSON (default weights if omitted)")
    p.add_argument("--frames", required=True, help="JSON-lines human trajectory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retarget)

    p = common(sub.add_parser("simulate", help="run simulated collection episodes"))
    p.add_argument("--run-config", help="RunConfig JSON; flags override its fields")
    p.add_argument("--env", help="preset name (paper-like, ideal) or env config JSON path")
    p.add_argument("--retarget-config")
    p.add_argument("--hand-model")
    p.add_argument("--out")
    p.add_argument("--episodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--session-id")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("validate", help="check a dataset and report sync metrics"))
    p.add_argument("--root", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ModelError, RetargetError, StoreError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"teledex {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
