"""Shared builders for the test suite."""

from __future__ import annotations

import math
import random

import pytest

from tirkit.types import (ANSWER, CODE, MAIN_CHAIN, SEARCH, Segment, SampleRecord,
                          THINK, TOOL_CALL, TOOL_RESULT, TokenEvent, Trajectory,
                          ingest_token_event, label_for_score)


def event(text: str = "x", probs: tuple[float, ...] = (1.0,), position: int = 0
          ) -> TokenEvent:
    """TokenEvent whose alternatives carry the given probabilities."""
    alts = tuple((f"t{i}" if i else text, math.log(p) if p > 0 else -745.0)
                 for i, p in enumerate(probs))
    chosen_lp = dict(alts).get(text, alts[0][1])
    return ingest_token_event(position, text, chosen_lp, alts)


def events_with_entropies(entropies, rng=None) -> tuple[TokenEvent, ...]:
    """One TokenEvent per requested entropy value (nats)."""
    from tirkit.fixtures import dist_with_entropy
    out = []
    for i, h in enumerate(entropies):
        dist = dist_with_entropy(f"w{i}", h, support=16)
        alts = tuple((t, math.log(p) if p > 0 else -745.0) for t, p in dist)
        out.append(ingest_token_event(i, f"w{i}", alts[0][1], alts))
    return tuple(out)


def think_step(entropies) -> Segment:
    return Segment(kind=THINK, text="".join(f"w{i}" for i in range(len(entropies))),
                   tokens=events_with_entropies(entropies))


def make_traj(sample_id: str = "s1", traj_id: str = "t1", *, code_calls: int = 0,
              search_calls: int = 0, answer: str | None = "42", score: float = 1.0,
              gen_tokens: int = 5, mean_entropy: float = 0.5) -> Trajectory:
    """Structurally valid trajectory with the requested call counts."""
    segments: list[Segment] = [Segment(kind=THINK, text="hm",
                                       tokens=events_with_entropies([mean_entropy] * gen_tokens))]
    for i in range(code_calls):
        segments.append(Segment(kind=TOOL_CALL, text=f"print({i})", tool=CODE))
        segments.append(Segment(kind=TOOL_RESULT, text=f"{i}\n", tool=CODE))
    for i in range(search_calls):
        segments.append(Segment(kind=TOOL_CALL, text=f"query {i}", tool=SEARCH))
        segments.append(Segment(kind=TOOL_RESULT, text="no results found", tool=SEARCH))
    if answer is not None:
        segments.append(Segment(kind=ANSWER, text=answer))
    per_tool = {}
    if code_calls:
        per_tool[CODE] = code_calls
    if search_calls:
        per_tool[SEARCH] = search_calls
    return Trajectory(traj_id=traj_id, sample_id=sample_id, segments=tuple(segments),
                      tool_call_count=code_calls + search_calls,
                      per_tool_counts=per_tool, final_answer=answer, score=score,
                      label=label_for_score(score), mean_entropy=mean_entropy,
                      gen_token_count=gen_tokens, origin=MAIN_CHAIN)


def make_sample(sample_id: str = "s1", gold: str = "42", kind: str = "math",
                sft: Trajectory | None = None) -> SampleRecord:
    return SampleRecord(sample_id=sample_id, question=f"question {sample_id}",
                        gold_answers=(gold,), task_kind=kind, sft_trajectory=sft)


@pytest.fixture
def corpus_path(tmp_path):
    from tirkit.fixtures import write_fixture_corpus
    return str(write_fixture_corpus(tmp_path / "corpus.jsonl"))


@pytest.fixture
def rng():
    return random.Random(1234)
