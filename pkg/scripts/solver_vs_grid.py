"""Compare the retarget solver against brute-force grid search on the planar two-link finger."""

import argparse
import time

import numpy as np

from teledex.kinematics import forward_keypoints, load_model
from teledex.retarget import HumanHandFrame, RetargetConfig, calibrate, solve_retarget


def grid_argmin(target, prev, alpha_smooth, l1=0.04, l2=0.03, n=2001):
    t1 = np.linspace(-0.5, 1.5, n)[:, None]
    t2 = np.linspace(0.0, 2.0, n)[None, :]
    mx, my = l1 * np.cos(t1), l1 * np.sin(t1)
    tx, ty = mx + l2 * np.cos(t1 + t2), my + l2 * np.sin(t1 + t2)
    m, tip = target[(0, 1)], target[(0, 2)]
    cost = (mx - m[0]) ** 2 + (my - m[1]) ** 2 + m[2] ** 2 + (tx - tip[0]) ** 2 + (ty - tip[1]) ** 2 + tip[2] ** 2
    cost = cost + alpha_smooth * ((t1 - prev[0]) ** 2 + (t2 - prev[1]) ** 2)
    i, j = np.unravel_index(np.argmin(cost), cost.shape)
    return np.array([t1[i, 0], t2[0, j]]), float(cost[i, j])


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=25)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--alpha-smooth", type=float, default=1e-5)
    args = parser.parse_args()

    model = load_model("planar2")
    rng = np.random.default_rng(args.seed)
    profile = calibrate(model, np.zeros(2), HumanHandFrame(0.0, forward_keypoints(model, np.zeros(2))))
    config = RetargetConfig(1.0, 0.0, args.alpha_smooth)
    worst_dist, worst_gap, iters, elapsed = 0.0, -np.inf, [], 0.0
    for _ in range(args.trials):
        target = HumanHandFrame(0.0, forward_keypoints(model, rng.uniform(model.lower, model.upper)))
        prev = rng.uniform(model.lower, model.upper)
        start = time.perf_counter()
        theta, report = solve_retarget(model, profile, config, target, prev)
        elapsed += time.perf_counter() - start
        best, best_cost = grid_argmin(target, prev, args.alpha_smooth)
        worst_dist = max(worst_dist, float(np.abs(theta - best).max()))
        worst_gap = max(worst_gap, report.final_cost - best_cost)
        iters.append(report.iterations)
    print(f"trials {args.trials}: max |theta - grid| {worst_dist:.2e} rad, "
          f"max (solver - grid) cost {worst_gap:.2e}, mean iterations {np.mean(iters):.1f}, "
          f"solve time {1e3 * elapsed / args.trials:.2f} ms")


if __name__ == "__main__":
    main()
