"""Sweep the smoothing weight and print joint motion against mean alignment cost.

Drives the synthetic grasp through the retargeter for each weight. Motion counts the
first jump away from the calibration pose.
"""

import argparse

import numpy as np

from teledex.kinematics import load_model
from teledex.pipeline import SyntheticOperator, calibrate_for
from teledex.retarget import RetargetConfig, align_cost, solve_retarget, transform_keypoints


def track(model, profile, config, frames):
    theta = profile.theta0
    path, align = [theta], []
    keys = config.alignment_keys(model)
    for frame in frames:
        theta, _ = solve_retarget(model, profile, config, frame, theta)
        path.append(theta)
        align.append(align_cost(model, theta, transform_keypoints(profile, frame), keys))
    return float((np.diff(np.array(path), axis=0) ** 2).sum()), float(np.mean(align))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--hand", default="o6", help="bundled robot hand (o6, l10, ...)")
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--alpha-align", type=float, default=100.0)
    parser.add_argument("--alpha-couple", type=float, default=50.0)
    parser.add_argument("--weights", type=float, nargs="+", default=[0.0, 0.01, 0.03, 0.1, 0.3, 1.0])
    args = parser.parse_args()

    human, model = load_model("human"), load_model(args.hand)
    operator = SyntheticOperator(human)
    frames = [operator.frame(0.04 * k) for k in range(args.steps)]
    profile = calibrate_for(model, human)
    base = None
    print(f"{'alpha_smooth':>12} {'motion rad^2':>13} {'align m^2':>11} {'align vs 0':>10}")
    for w in args.weights:
        config = RetargetConfig(args.alpha_align, args.alpha_couple, w)
        motion, align = track(model, profile, config, frames)
        base = align if base is None else base
        print(f"{w:12.3g} {motion:13.5f} {align:11.3e} {align / base:10.3f}")


if __name__ == "__main__":
    main()
