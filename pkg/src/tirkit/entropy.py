"""Numeric kernel for token entropy and branch-point profiling.

All entropies are in nats. Endpoints expose only top-K alternatives, so the
tail of the vocabulary distribution is unobserved; residual_mode="lump"
treats the missing mass as a single pseudo-outcome (a bounded underestimate
of the tail's structure), "ignore" drops it. Lump never yields less than
ignore on the same input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (EmptyStep, InsufficientData, InvalidDistribution,
                     NoGeneratedTokens, OutOfRange)
from .types import Segment, TokenEvent, Trajectory, TOOL_RESULT

MASS_TOLERANCE = 1e-6
RESIDUAL_FLOOR = 1e-9

DEFAULT_PREFIX_LENGTHS = (10, 20, 30, 40, 50)

LUMP = "lump"
IGNORE = "ignore"


def token_entropy(dist: Iterable[tuple[str, float]], residual_mode: str = LUMP) -> float:
    """Shannon entropy of a next-token distribution given as (token, logprob).

    With residual_mode="lump", unobserved mass r = 1 - sum(p) contributes
    -r*log(r) as one extra outcome.
    """
    if residual_mode not in (LUMP, IGNORE):
        raise ValueError(f"unknown residual_mode {residual_mode!r}")
    total = 0.0
    h = 0.0
    for _, lp in dist:
        if lp > 0:
            raise InvalidDistribution(f"logprob {lp} > 0")
        p = math.exp(lp)
        total += p
        if p > 0:
            h -= p * lp
    if total > 1 + MASS_TOLERANCE:
        raise InvalidDistribution(f"probability mass {total} exceeds 1")
    if residual_mode == LUMP:
        r = 1.0 - total
        if r > RESIDUAL_FLOOR:
            h -= r * math.log(r)
    return max(h, 0.0)


def event_entropy(event: TokenEvent, residual_mode: str = LUMP) -> float:
    return token_entropy(event.alternatives, residual_mode)


def prefix_avg_entropy(step_token_entropies: Sequence[float], i: int) -> float:
    """Mean of the first i per-token entropies of a step."""
    if not 1 <= i <= len(step_token_entropies):
        raise OutOfRange(f"i={i} outside [1, {len(step_token_entropies)}]")
    return sum(step_token_entropies[:i]) / i


@dataclass(frozen=True)
class StepEntropyProfile:
    """Prefix-average entropies of one step, with the retained maximum.

    best_length is the smallest candidate length attaining best_h_avg
    (cheaper branch prefixes win ties).
    """

    step_index: int
    candidate_prefix_lengths: tuple[int, ...]
    h_avg_by_length: dict[int, float]
    best_length: int
    best_h_avg: float


def step_profile(step: Segment, prefix_lengths: Iterable[int] = DEFAULT_PREFIX_LENGTHS,
                 step_index: int = 0, residual_mode: str = LUMP) -> StepEntropyProfile:
    """Profile one model-generated step over the configured prefix lengths.

    Candidate lengths are clipped to the step's token count; a step shorter
    than the smallest configured prefix uses its full length as the sole
    candidate, so short steps stay eligible for branching.
    """
    if step.kind == TOOL_RESULT:
        raise EmptyStep("tool_result steps are not model-generated")
    if not step.tokens:
        raise EmptyStep(f"step {step_index} has no tokens")
    entropies = [event_entropy(tok, residual_mode) for tok in step.tokens]
    lengths = sorted(l for l in set(prefix_lengths) if l <= len(entropies))
    if not lengths:
        lengths = [len(entropies)]
    h_by_len = {l: prefix_avg_entropy(entropies, l) for l in lengths}
    best_h = max(h_by_len.values())
    best_len = min(l for l, h in h_by_len.items() if h == best_h)
    return StepEntropyProfile(step_index=step_index,
                              candidate_prefix_lengths=tuple(lengths),
                              h_avg_by_length=h_by_len,
                              best_length=best_len, best_h_avg=best_h)


def chain_mean_entropy(traj_or_segments, residual_mode: str = LUMP) -> float:
    """Arithmetic mean token entropy over all model-generated tokens."""
    segments = getattr(traj_or_segments, "segments", traj_or_segments)
    entropies = [event_entropy(tok, residual_mode)
                 for seg in segments for tok in seg.tokens]
    if not entropies:
        raise NoGeneratedTokens("trajectory has no generated tokens")
    return sum(entropies) / len(entropies)


@dataclass(frozen=True)
class ProfileRow:
    group: str  # "more" | "fewer" | "all"
    bucket_index: int
    mean_entropy_nats: float
    token_count: int


PROFILE_CSV_HEADER = "group,bucket_index,mean_entropy_nats,token_count"
WARNING_BUCKET = -1


def entropy_profile_report(trajectories: Iterable[Trajectory], bucket_count: int = 20,
                           residual_mode: str = LUMP) -> list[ProfileRow]:
    """Bucketed entropy profile, split into more/fewer tool-call groups.

    Trajectories are grouped per sample against the per-sample median tool
    call count (strictly above -> "more"). Generated tokens are bucketed by
    relative position within each inter-result interval: from episode start
    or a tool_result injection to the next injection or episode end.

    When tool-call counts are degenerate everywhere (no trajectory above its
    sample median), a single "all" group is emitted together with a warning
    row (bucket_index -1).
    """
    if bucket_count < 2:
        raise ValueError("bucket_count must be >= 2")
    trajs = list(trajectories)
    if not trajs:
        raise InsufficientData("no trajectories")

    by_sample: dict[str, list[Trajectory]] = {}
    for t in trajs:
        by_sample.setdefault(t.sample_id, []).append(t)

    groups: dict[str, list[Trajectory]] = {"more": [], "fewer": []}
    for sample_trajs in by_sample.values():
        counts = sorted(t.tool_call_count for t in sample_trajs)
        median = counts[len(counts) // 2] if len(counts) % 2 else (
            (counts[len(counts) // 2 - 1] + counts[len(counts) // 2]) / 2)
        for t in sample_trajs:
            groups["more" if t.tool_call_count > median else "fewer"].append(t)

    degenerate = not groups["more"]
    if degenerate:
        groups = {"all": groups["fewer"]}
    for name, members in groups.items():
        if not members:
            raise InsufficientData(f"group {name!r} is empty")

    rows: list[ProfileRow] = []
    for name, members in groups.items():
        sums = [0.0] * bucket_count
        counts = [0] * bucket_count
        for traj in members:
            for interval in _inter_result_intervals(traj):
                n = len(interval)
                for j, h in enumerate(interval):
                    bucket = min(int(j / n * bucket_count), bucket_count - 1)
                    sums[bucket] += _event_h(h, residual_mode)
                    counts[bucket] += 1
        for b in range(bucket_count):
            if counts[b]:
                rows.append(ProfileRow(group=name, bucket_index=b,
                                       mean_entropy_nats=sums[b] / counts[b],
                                       token_count=counts[b]))
    if degenerate:
        rows.append(ProfileRow(group="all", bucket_index=WARNING_BUCKET,
                               mean_entropy_nats=0.0, token_count=0))
    return rows


def _event_h(event: TokenEvent, residual_mode: str) -> float:
    return event_entropy(event, residual_mode)


def _inter_result_intervals(traj: Trajectory) -> list[list[TokenEvent]]:
    """Generated-token runs delimited by tool_result injections."""
    intervals: list[list[TokenEvent]] = []
    current: list[TokenEvent] = []
    for seg in traj.segments:
        if seg.kind == TOOL_RESULT:
            if current:
                intervals.append(current)
            current = []
        else:
            current.extend(seg.tokens)
    if current:
        intervals.append(current)
    return intervals


def profile_rows_to_csv(rows: Iterable[ProfileRow]) -> str:
    lines = [PROFILE_CSV_HEADER]
    for r in rows:
        lines.append(f"{r.group},{r.bucket_index},{r.mean_entropy_nats:.9g},{r.token_count}")
    return "\n".join(lines) + "\n"
