#!/usr/bin/env python3
"""Measure generated-token cost: entropy-guided branching vs vanilla rollouts.

Runs both strategies on the scripted 512-token scenario so each produces
seven trajectories, and prints the generated-token ratio (branch prefixes
are copied, not re-generated, and do not count).
"""

import argparse
import sys

from tirkit import fixtures
from tirkit.gateway import InProcessClient
from tirkit.sampler import (EntropyStrategy, SamplerConfig, VanillaStrategy,
                            sample_for_curation)
from tirkit.toolbox import ToolRunner


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = SamplerConfig()
    tools = ToolRunner()
    client = InProcessClient(fixtures.cost_scenario())

    _, vanilla = sample_for_curation(fixtures.COST_SAMPLE, VanillaStrategy(m=7),
                                     args.seed, client, tools, cfg)
    pool, entropy = sample_for_curation(fixtures.COST_SAMPLE,
                                        EntropyStrategy(k=3, b=2),
                                        args.seed, client, tools, cfg)
    ratio = entropy.new_tokens / vanilla.new_tokens
    print(f"vanilla m=7: {vanilla.new_tokens} generated tokens")
    print(f"entropy k=3 b=2 ({len(pool.trajectories)} trajectories): "
          f"{entropy.new_tokens} generated tokens")
    print(f"ratio: {ratio:.4f}")
    return 0 if ratio <= 0.7 else 1


if __name__ == "__main__":
    sys.exit(main())
