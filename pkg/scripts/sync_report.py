"""Simulate a batch of episodes under a jitter preset and print per-episode sync metrics.

    python3 scripts/sync_report.py --env paper-like --episodes 20 --out /tmp/ds
"""

import argparse

from teledex.collection import load_env_config
from teledex.pipeline import RunConfig, simulate
from teledex.store import validate_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--env", default="paper-like")
    parser.add_argument("--episodes", type=int, default=20)
    parser.add_argument("--steps", type=int, default=491)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="dataset")
    args = parser.parse_args()

    run = RunConfig(env=args.env, out=args.out, episodes=args.episodes, steps=args.steps, seed=args.seed)
    results = simulate(run, load_env_config(args.env))
    print(f"{'episode':<40} {'success %':>9} {'avg ms':>8} {'tp99 ms':>8}")
    for r in results:
        print(f"{str(r.path):<40} {r.sync_success_rate:9.2f} {r.avg_sync_error_ms:8.2f} {r.tp99_ms:8.2f}")
    report = validate_dataset(args.out)
    print(f"{'overall':<40} {report.sync_success_rate:9.2f} {report.avg_sync_error_ms:8.2f} {report.tp99_ms:8.2f}")


if __name__ == "__main__":
    main()
