#!/usr/bin/env python3
"""Print bucketed entropy profiles for the scripted mock scenarios.

Shows the rise-then-fall shape between consecutive tool results, and the
lower grand-mean entropy of the fewer-calls group on the call-count
contrast scenario.
"""

import argparse
import sys

from tirkit import fixtures
from tirkit.entropy import entropy_profile_report, profile_rows_to_csv
from tirkit.gateway import InProcessClient
from tirkit.sampler import SamplerConfig, derive_seed, rollout_vanilla, run_episode
from tirkit.toolbox import ToolRunner


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--rollouts", type=int, default=10)
    args = parser.parse_args()

    cfg = SamplerConfig()
    tools = ToolRunner()

    client = InProcessClient(fixtures.rise_fall_scenario())
    traj, _ = run_episode(fixtures.RISE_SAMPLE,
                          derive_seed(args.seed, "rise-1", "main"),
                          client, tools, cfg, traj_id="rise-1-main")
    print("# rise-then-fall scenario (single chain)")
    print(profile_rows_to_csv(entropy_profile_report([traj])))

    client = InProcessClient(fixtures.call_count_contrast_scenario())
    trajs = rollout_vanilla(fixtures.CONTRAST_SAMPLE, args.rollouts, args.seed,
                            client, tools, cfg)
    rows = entropy_profile_report(trajs)
    print("# call-count contrast scenario "
          f"({args.rollouts} rollouts, calls: "
          f"{sorted(t.tool_call_count for t in trajs)})")
    print(profile_rows_to_csv(rows))
    grand: dict[str, tuple[float, int]] = {}
    for r in rows:
        if r.bucket_index >= 0:
            s, c = grand.get(r.group, (0.0, 0))
            grand[r.group] = (s + r.mean_entropy_nats * r.token_count,
                              c + r.token_count)
    for group, (s, c) in sorted(grand.items()):
        print(f"{group}: grand mean {s / c:.4f} nats over {c} tokens")
    return 0


if __name__ == "__main__":
    sys.exit(main())
