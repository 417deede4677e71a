"""Command entry point.

Exactly one line (the trained model's endpoint URL) goes to stdout on
success; diagnostics go to stderr. Exit codes: 0 ok, 2 bad input or
configuration, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import sys

from .data import DataError
from .train import TrainSpec, train_dpo, train_sft


def _add_spec_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--base-model-id", default=TrainSpec.base_model_id)
    parser.add_argument("--lora-rank", type=int, default=TrainSpec.lora_rank)
    parser.add_argument("--epochs", type=int, default=TrainSpec.epochs)
    parser.add_argument("--learning-rate", type=float,
                        default=TrainSpec.learning_rate)
    parser.add_argument("--batch-size", type=int, default=TrainSpec.batch_size)
    parser.add_argument("--beta", type=float, default=TrainSpec.beta)
    parser.add_argument("--output-dir", default=TrainSpec.output_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tirkit-trainer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    dpo = sub.add_parser("dpo", help="preference training on a pairs file")
    dpo.add_argument("--pairs-path", required=True)
    _add_spec_flags(dpo)
    sft = sub.add_parser("sft", help="supervised training on a corpus file")
    sft.add_argument("--corpus-path", required=True)
    _add_spec_flags(sft)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = TrainSpec(pairs_path=getattr(args, "pairs_path", None),
                         base_model_id=args.base_model_id,
                         lora_rank=args.lora_rank, epochs=args.epochs,
                         learning_rate=args.learning_rate,
                         batch_size=args.batch_size, beta=args.beta,
                         output_dir=args.output_dir)
        if args.command == "dpo":
            url = train_dpo(spec)
        else:
            url = train_sft(args.corpus_path, spec)
    except DataError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    print(url)
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
