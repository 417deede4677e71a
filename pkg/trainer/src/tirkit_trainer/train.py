"""Training loops: pairwise preference optimization and supervised NLL.

Both objectives run LoRA-only updates on the character model; the frozen
adapter-free model serves as the preference reference. Each run writes
model.pt plus a train_log.json with per-batch losses and returns a
file:// endpoint for the orchestrator.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .data import DataError, PairExample, SftExample, load_pairs, load_sft_corpus
from .model import CharLM, adapters_disabled, response_logprob

_BUILD_SEED = 0


@dataclass
class TrainSpec:
    pairs_path: str | None = None
    base_model_id: str = "char-tiny-2x32"
    lora_rank: int = 8
    epochs: int = 3
    learning_rate: float = 7e-6
    batch_size: int = 8
    beta: float = 0.1
    output_dir: str = "trainer_out"

    def __post_init__(self):
        if self.beta <= 0:
            raise DataError(f"beta must be positive, got {self.beta}")
        if min(self.lora_rank, self.epochs, self.batch_size) < 1:
            raise DataError("lora_rank, epochs, and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")


def build_model(spec: TrainSpec) -> CharLM:
    torch.manual_seed(_BUILD_SEED)
    return CharLM(rank=spec.lora_rank)


def dpo_loss(model: CharLM, batch: list[PairExample], beta: float) -> torch.Tensor:
    """Mean -log sigmoid(beta * (reward margin)) over the batch."""
    losses = []
    for pair in batch:
        pol_w = response_logprob(model, pair.prompt, pair.chosen, pair.chosen_spans)
        pol_l = response_logprob(model, pair.prompt, pair.rejected,
                                 pair.rejected_spans)
        with torch.no_grad(), adapters_disabled(model):
            ref_w = response_logprob(model, pair.prompt, pair.chosen,
                                     pair.chosen_spans)
            ref_l = response_logprob(model, pair.prompt, pair.rejected,
                                     pair.rejected_spans)
        margin = (pol_w - ref_w) - (pol_l - ref_l)
        losses.append(-F.logsigmoid(beta * margin))
    return torch.stack(losses).mean()


def sft_loss(model: CharLM, batch: list[SftExample]) -> torch.Tensor:
    """Mean per-token negative log-likelihood over unmasked target tokens."""
    total = None
    tokens = 0
    for row in batch:
        logp = response_logprob(model, row.prompt, row.target, row.spans)
        total = logp if total is None else total + logp
        tokens += sum(1 for i, _ in enumerate(row.target)
                      if not any(s <= i < e for s, e in row.spans))
    if tokens == 0:
        raise DataError("corpus has no unmasked target tokens")
    return -total / tokens


def _chunks(rows: list, size: int):
    for i in range(0, len(rows), size):
        yield rows[i:i + size]


def _run(model: CharLM, rows: list, spec: TrainSpec, loss_fn) -> list[float]:
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=spec.learning_rate)
    history = []
    for _ in range(spec.epochs):
        for batch in _chunks(rows, spec.batch_size):
            loss = loss_fn(model, batch)
            history.append(loss.detach().item())
            opt.zero_grad()
            loss.backward()
            opt.step()
    return history


def _finish(model: CharLM, spec: TrainSpec, history: list[float],
            objective: str, n_rows: int) -> str:
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.pt"
    torch.save(model.state_dict(), model_path)
    log = {"objective": objective, "rows": n_rows, "batch_losses": history,
           "spec": asdict(spec)}
    (out_dir / "train_log.json").write_text(json.dumps(log, indent=1) + "\n",
                                            encoding="utf-8")
    return f"file://{model_path.resolve()}"


def train_dpo(spec: TrainSpec) -> str:
    """Fit the preference objective on spec.pairs_path; returns an endpoint."""
    if not spec.pairs_path:
        raise DataError("pairs_path is required for preference training")
    pairs = load_pairs(spec.pairs_path)
    model = build_model(spec)
    history = _run(model, pairs, spec,
                   lambda m, batch: dpo_loss(m, batch, spec.beta))
    return _finish(model, spec, history, "dpo", len(pairs))


def train_sft(corpus_path, spec: TrainSpec) -> str:
    """Fit masked token-level NLL on a (prompt, target) corpus."""
    rows = load_sft_corpus(corpus_path)
    model = build_model(spec)
    history = _run(model, rows, spec, sft_loss)
    return _finish(model, spec, history, "sft", len(rows))


INITIAL_DPO_LOSS = math.log(2)  # identical policy/reference at startup
