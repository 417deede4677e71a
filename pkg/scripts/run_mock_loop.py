#!/usr/bin/env python3
"""Run the full self-evolved loop against the bundled mock world.

Starts a mock completion server, materializes the bundled SFT corpus,
search corpus, and eval set into the run directory, wires a stub trainer
hook that echoes the mock endpoint back, and runs two loops.
"""

import argparse
import json
import sys
from pathlib import Path

from tirkit import fixtures, pipeline
from tirkit.config import load_config
from tirkit.gateway import mock_serve
from tirkit.types import write_sample_records


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--run-dir", default="runs/mock-loop")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--max-loops", type=int, default=2)
    args = parser.parse_args()

    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sft = run_dir / "sft_corpus.jsonl"
    eval_set = run_dir / "eval_set.jsonl"
    corpus = run_dir / "search_corpus.jsonl"
    write_sample_records(sft, fixtures.world_samples())
    write_sample_records(eval_set, fixtures.eval_samples())
    fixtures.write_fixture_corpus(corpus)
    stub = run_dir / "stub_trainer.py"

    with mock_serve(fixtures.world_scenario()) as handle:
        stub.write_text("import sys\nprint(sys.argv[3])\n")
        cfg = load_config(overrides={
            ("run", "seed"): str(args.seed),
            ("run", "run_dir"): str(run_dir),
            ("run", "endpoint"): handle.url,
            ("data", "sft_corpus"): str(sft),
            ("tool", "search.corpus"): str(corpus),
            ("loop", "eval_set"): str(eval_set),
            ("loop", "max_loops"): str(args.max_loops),
            ("loop", "convergence_epsilon"): "0",
            ("loop", "trainer_hook"):
                f"{sys.executable} {stub} {{pairs_path}} {{loop}} {handle.url}",
        })
        manifest = pipeline.run_self_evolved_loop(cfg)
    print(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
