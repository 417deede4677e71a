"""Episode loop, vanilla multi-rollout, and entropy-guided branch sampling.

An episode alternates generation (stopping at tool/answer close tags) with
tool execution and result injection until the answer closes, the budget
forces termination, or the episode token cap is hit. The model is expected
to emit explicit tags; the sampler appends the matched stop text itself and
injects tool results as non-generated text, so the byte stream of an
episode is exactly: prompt + generated tokens + appended stops + injected
results. Branch resumption replays that byte stream up to a cut point.

Entropy-guided sampling produces one main chain, profiles each step's
prefix-average entropy, and resumes generation from the top-k highest-
entropy step prefixes, re-deriving the tool budget from the shared prefix.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from . import entropy as ent
from .errors import EpisodeOverflow, NoEligibleSteps, RolloutBatchFailed, ValidationError
from .gateway import GenerationRequest
from .metrics import RemoteJudge, score_answer
from .toolbox import ToolBudget, ToolRunner, budget_exceeded_result
from .types import (ANSWER, Origin, SamplePool, SampleRecord, Segment, TOOL_CALL,
                    TOOL_RESULT, TokenEvent, Trajectory, branch_origin, make_pool,
                    MAIN_CHAIN, parse_segments_with_spans, segment_wire_text,
                    vanilla_origin)

DEFAULT_TEMPLATE = (
    "Answer the question below. Reason inside <think>...</think> tags. You may "
    "run Python code inside <python>...</python> tags and search a knowledge "
    "base inside <search>...</search> tags; each call's output is returned in "
    "a <result>...</result> block. Give the final answer inside "
    "<answer>...</answer> tags.\n\nQuestion: {question}\n")

STOP_ANSWER = "</answer>"
STOP_BY_TAG = {"</python>": "code", "</search>": "search"}
OPEN_BY_TOOL = {"code": "<python>", "search": "<search>"}
EPISODE_STOPS = ("</python>", "</search>", STOP_ANSWER)


@dataclass(frozen=True)
class SamplerConfig:
    max_total_tokens: int = 4096
    max_call_tokens: int = 1024
    per_tool_limit: int = 4
    temperature: float = 1.0
    top_logprobs: int = 20
    residual_mode: str = ent.LUMP
    prefix_lengths: tuple[int, ...] = ent.DEFAULT_PREFIX_LENGTHS
    rollouts: int = 10  # m
    branch_k: int = 3
    branch_b: int = 2
    min_rollout_success: float = 0.5
    instruction_template: str = DEFAULT_TEMPLATE

    def prompt_for(self, sample: SampleRecord) -> str:
        return self.instruction_template.format(question=sample.question)


@dataclass(frozen=True)
class VanillaStrategy:
    m: int

    name = "vanilla"


@dataclass(frozen=True)
class EntropyStrategy:
    k: int
    b: int

    name = "entropy"


@dataclass
class SamplingStats:
    """Generated-token accounting for the cost-ratio comparison.

    new_tokens counts only freshly generated tokens; a branch's shared
    prefix is copied, not re-generated, and is excluded.
    """

    episodes: int = 0
    failures: int = 0
    new_tokens: int = 0

    def merge(self, other: "SamplingStats") -> None:
        self.episodes += other.episodes
        self.failures += other.failures
        self.new_tokens += other.new_tokens


def derive_seed(run_seed: int, sample_id: str, role: str, index: int = 0) -> int:
    """Stable per-(sample, role, index) seed for reproducible sampling."""
    digest = hashlib.sha256(f"{run_seed}|{sample_id}|{role}|{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class _Part:
    text: str
    tokens: list[TokenEvent] | None  # None for injected (non-generated) text


def run_episode(sample: SampleRecord, seed: int, client, tools: ToolRunner,
                cfg: SamplerConfig, traj_id: str, origin: Origin = MAIN_CHAIN,
                initial_parts: Sequence[_Part] = (),
                initial_budget: ToolBudget | None = None) -> tuple[Trajectory, int]:
    """Run one TIR episode; return (trajectory, newly generated token count).

    initial_parts / initial_budget seed the episode with an inherited prefix
    for branch resumption.
    """
    prompt_base = cfg.prompt_for(sample)
    parts: list[_Part] = [replace(p) for p in initial_parts]
    budget = initial_budget if initial_budget is not None else ToolBudget(cfg.per_tool_limit)
    inherited = sum(len(p.tokens) for p in parts if p.tokens is not None)
    gen_count = inherited
    answered = False
    overflow = False

    while not answered:
        remaining = cfg.max_total_tokens - gen_count
        if remaining <= 0:
            overflow = True
            break
        prompt = prompt_base + "".join(p.text for p in parts)
        req = GenerationRequest(prefix_text=prompt, stop_sequences=EPISODE_STOPS,
                                max_new_tokens=min(cfg.max_call_tokens, remaining),
                                temperature=cfg.temperature,
                                top_logprobs=cfg.top_logprobs, seed=seed)
        tokens, finish = client.generate(req)
        if tokens:
            parts.append(_Part(text="".join(t.token_text for t in tokens),
                               tokens=list(tokens)))
            gen_count += len(tokens)
        if finish.kind == "stop":
            stop = finish.stop_sequence
            parts.append(_Part(text=stop, tokens=None))
            if stop == STOP_ANSWER:
                answered = True
            else:
                tool = STOP_BY_TAG[stop]
                parts.append(_Part(text=_execute_call(parts, tool, tools, budget),
                                   tokens=None))
        elif finish.kind == "length":
            if gen_count >= cfg.max_total_tokens:
                overflow = True
                break
            # mid-episode length cap without overall overflow: treat as overflow too
            overflow = True
            break
        else:  # eos without a closed answer
            break

    traj = _assemble_trajectory(sample, parts, budget, cfg, traj_id, origin,
                                answered=answered, overflow=overflow)
    return traj, gen_count - inherited


def _execute_call(parts: list[_Part], tool: str, tools: ToolRunner,
                  budget: ToolBudget) -> str:
    """Extract the pending call's payload, run it, return injected wire text."""
    full = "".join(p.text for p in parts)
    open_tag = OPEN_BY_TOOL[tool]
    start = full.rfind(open_tag)
    if start == -1:
        raise ValidationError(f"stop for {tool} without an opening {open_tag}")
    payload = full[start + len(open_tag):len(full) - len(f"</{'python' if tool == 'code' else 'search'}>")]
    call_seg = Segment(kind=TOOL_CALL, text=payload, tool=tool)
    try:
        result_seg = tools.execute(call_seg, budget)
    except Exception as exc:
        from .errors import BudgetExhausted
        if isinstance(exc, BudgetExhausted):
            result_seg = budget_exceeded_result(tool)
        else:
            raise
    return segment_wire_text(result_seg)


def _assemble_trajectory(sample: SampleRecord, parts: list[_Part], budget: ToolBudget,
                         cfg: SamplerConfig, traj_id: str, origin: Origin, *,
                         answered: bool, overflow: bool) -> Trajectory:
    full_text = "".join(p.text for p in parts)
    entries = parse_segments_with_spans(full_text, tolerant=True)

    # absolute char range of every generated token
    token_ranges: list[tuple[int, int, TokenEvent]] = []
    offset = 0
    for part in parts:
        if part.tokens is not None:
            pos = offset
            for tok in part.tokens:
                token_ranges.append((pos, pos + len(tok.token_text), tok))
                pos += len(tok.token_text)
        offset += len(part.text)

    per_segment: list[list[TokenEvent]] = [[] for _ in entries]
    for start, _, tok in token_ranges:
        idx = _segment_index_for(entries, start)
        if idx is None:
            continue
        if entries[idx][0].kind == TOOL_RESULT and idx > 0:
            idx -= 1  # never attach generated tokens to an injected result
        per_segment[idx].append(tok)

    segments = []
    for (seg, _), toks in zip(entries, per_segment):
        if seg.kind == TOOL_RESULT:
            segments.append(seg)
        else:
            segments.append(replace(seg, tokens=tuple(
                replace(t, position=j) for j, t in enumerate(toks))))
    segments = tuple(segments)

    all_tokens = [t for s in segments for t in s.tokens]
    mean_h = (sum(ent.event_entropy(t, cfg.residual_mode) for t in all_tokens)
              / len(all_tokens)) if all_tokens else 0.0

    final_answer = None
    if answered and not overflow:
        for seg in segments:
            if seg.kind == ANSWER:
                final_answer = seg.text
    per_tool = dict(budget.used)
    return Trajectory(traj_id=traj_id, sample_id=sample.sample_id, segments=segments,
                      tool_call_count=sum(per_tool.values()), per_tool_counts=per_tool,
                      final_answer=final_answer, score=0.0, label="incorrect",
                      mean_entropy=mean_h, gen_token_count=len(all_tokens),
                      origin=origin)


def _segment_index_for(entries, char_pos: int) -> int | None:
    for i, (_, (start, end)) in enumerate(entries):
        if start <= char_pos < end:
            return i
        if char_pos < start:
            return i  # gap text attaches forward
    return len(entries) - 1 if entries else None


def rollout_vanilla(sample: SampleRecord, m: int, run_seed: int, client,
                    tools: ToolRunner, cfg: SamplerConfig,
                    stats: SamplingStats | None = None) -> list[Trajectory]:
    """m independent episodes with distinct derived seeds.

    Per-rollout failures are tolerated while at least ceil(m * min_success)
    episodes complete; below that the batch fails.
    """
    if m < 1:
        raise ValidationError("m must be >= 1")
    stats = stats if stats is not None else SamplingStats()
    out: list[Trajectory] = []
    failures = 0
    for i in range(m):
        seed = derive_seed(run_seed, sample.sample_id, "vanilla", i)
        try:
            traj, new = run_episode(sample, seed, client, tools, cfg,
                                    traj_id=f"{sample.sample_id}-vanilla-{i}",
                                    origin=vanilla_origin(i))
        except EpisodeOverflow:
            failures += 1
            continue
        except Exception:
            failures += 1
            continue
        stats.episodes += 1
        stats.new_tokens += new
        out.append(traj)
    stats.failures += failures
    needed = math.ceil(m * cfg.min_rollout_success)
    if len(out) < needed:
        raise RolloutBatchFailed(
            f"only {len(out)}/{m} rollouts completed (needed {needed})")
    return out


@dataclass(frozen=True)
class BranchPlan:
    """Top-k branch points of a main chain, best entropy first."""

    parent_traj_id: str
    points: tuple[tuple[int, int, float], ...]  # (step_index, prefix_len, h_avg)
    branches_per_point: int


def eligible_step_indices(main: Trajectory) -> list[int]:
    """Model-generated, non-answer steps with at least one token."""
    return [i for i, seg in enumerate(main.segments)
            if seg.kind not in (TOOL_RESULT, ANSWER) and seg.tokens]


def plan_branches(main: Trajectory, k: int, b: int,
                  cfg: SamplerConfig = SamplerConfig()) -> BranchPlan:
    """Select the top-k steps by best prefix-average entropy.

    Ties break toward the earlier step; fewer than k eligible steps yields
    all of them. Each point's prefix length is the profile's best_length.
    """
    indices = eligible_step_indices(main)
    if not indices:
        raise NoEligibleSteps(f"trajectory {main.traj_id} has no branchable step")
    profiles = [ent.step_profile(main.segments[i], cfg.prefix_lengths,
                                 step_index=i, residual_mode=cfg.residual_mode)
                for i in indices]
    ranked = sorted(profiles, key=lambda p: (-p.best_h_avg, p.step_index))
    points = tuple((p.step_index, p.best_length, p.best_h_avg) for p in ranked[:k])
    return BranchPlan(parent_traj_id=main.traj_id, points=points, branches_per_point=b)


def _prefix_parts(main: Trajectory, step_index: int, prefix_len: int) -> list[_Part]:
    """Reconstruct the episode byte stream up to a cut inside one step."""
    parts: list[_Part] = []
    for seg in main.segments[:step_index]:
        if seg.kind == TOOL_RESULT:
            parts.append(_Part(text=segment_wire_text(seg), tokens=None))
        else:
            gen_text = "".join(t.token_text for t in seg.tokens)
            parts.append(_Part(text=gen_text, tokens=list(seg.tokens)))
            wire = segment_wire_text(seg)
            if wire.startswith(gen_text) and len(wire) > len(gen_text):
                parts.append(_Part(text=wire[len(gen_text):], tokens=None))  # injected stop
    step = main.segments[step_index]
    cut = step.tokens[:prefix_len]
    parts.append(_Part(text="".join(t.token_text for t in cut), tokens=list(cut)))
    return parts


def _prefix_budget(main: Trajectory, step_index: int, cfg: SamplerConfig) -> ToolBudget:
    from .types import _executed_call_counts
    used = _executed_call_counts(main.segments[:step_index])
    return ToolBudget(per_tool_limit=cfg.per_tool_limit, used=used)


def branch_from(main: Trajectory, plan: BranchPlan, sample: SampleRecord,
                run_seed: int, client, tools: ToolRunner, cfg: SamplerConfig,
                stats: SamplingStats | None = None) -> list[Trajectory]:
    """Resume generation b times from each planned point with fresh seeds."""
    if plan.parent_traj_id != main.traj_id:
        raise ValidationError("plan does not belong to this trajectory")
    stats = stats if stats is not None else SamplingStats()
    out: list[Trajectory] = []
    failures = 0
    for pi, (step_index, prefix_len, _) in enumerate(plan.points):
        parts = _prefix_parts(main, step_index, prefix_len)
        budget_template = _prefix_budget(main, step_index, cfg)
        for j in range(plan.branches_per_point):
            seed = derive_seed(run_seed, sample.sample_id, f"branch-{pi}", j)
            budget = ToolBudget(per_tool_limit=budget_template.per_tool_limit,
                                used=dict(budget_template.used))
            try:
                traj, new = run_episode(
                    sample, seed, client, tools, cfg,
                    traj_id=f"{main.traj_id}-b{pi}.{j}",
                    origin=branch_origin(main.traj_id, step_index, prefix_len),
                    initial_parts=parts, initial_budget=budget)
            except Exception:
                failures += 1
                continue
            stats.episodes += 1
            stats.new_tokens += new
            out.append(traj)
    stats.failures += failures
    total = len(plan.points) * plan.branches_per_point
    needed = math.ceil(total * cfg.min_rollout_success)
    if out and len(out) < needed:
        raise RolloutBatchFailed(
            f"only {len(out)}/{total} branches completed (needed {needed})")
    return out


def sample_for_curation(sample: SampleRecord, strategy, run_seed: int, client,
                        tools_factory, cfg: SamplerConfig,
                        judge: RemoteJudge | None = None
                        ) -> tuple[SamplePool, SamplingStats]:
    """Produce a scored, labeled pool for one question under a strategy.

    tools_factory builds a fresh ToolRunner per pool (budgets are
    per-episode; the runner itself is stateless and reused).
    """
    stats = SamplingStats()
    tools = tools_factory() if callable(tools_factory) else tools_factory
    if isinstance(strategy, VanillaStrategy):
        trajs = rollout_vanilla(sample, strategy.m, run_seed, client, tools, cfg, stats)
    elif isinstance(strategy, EntropyStrategy):
        seed = derive_seed(run_seed, sample.sample_id, "main")
        main, new = run_episode(sample, seed, client, tools, cfg,
                                traj_id=f"{sample.sample_id}-main",
                                origin=MAIN_CHAIN)
        stats.episodes += 1
        stats.new_tokens += new
        trajs = [main]
        try:
            plan = plan_branches(main, strategy.k, strategy.b, cfg)
        except NoEligibleSteps:
            plan = None
        if plan is not None:
            trajs.extend(branch_from(main, plan, sample, run_seed, client, tools,
                                     cfg, stats))
    else:
        raise ValidationError(f"unknown strategy {strategy!r}")

    scored = [t.with_score(score_answer(t.final_answer, sample, judge)) for t in trajs]
    return make_pool(sample.sample_id, scored), stats
