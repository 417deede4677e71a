"""Reference preference-pair trainer: a tiny character-level language model
fine-tuned with low-rank adapters, exposed as a command that prints the
resulting model endpoint.

This package reads the pair files emitted by the sampling/curation side
but shares no code with it; the JSONL layout is the only contract.
"""

from .data import DataError, load_pairs, load_sft_corpus
from .model import CharLM, LoRALinear, adapters_disabled, encode
from .train import (TrainSpec, build_model, dpo_loss, sft_loss, train_dpo,
                    train_sft)

__all__ = [
    "CharLM", "DataError", "LoRALinear", "TrainSpec", "adapters_disabled",
    "build_model", "dpo_loss", "encode", "load_pairs", "load_sft_corpus",
    "sft_loss", "train_dpo", "train_sft",
]
