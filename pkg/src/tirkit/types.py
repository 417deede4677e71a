"""Shared data model: tokens, segments, trajectories, pools, and pairs.

All types are immutable after construction (frozen dataclasses) and safe to
share across threads. The tagged wire format used by serialize/parse is:

    <think>...</think> <python>...</python> <search>...</search>
    <result>...</result> <answer>...</answer>

Bare text between tags parses as an implicit think segment. Tag literals
occurring inside injected tool-result text are escaped entity-style on
serialization so parsing stays unambiguous.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

from .errors import MalformedTags, ValidationError

MASS_TOLERANCE = 1e-6

THINK = "think"
TOOL_CALL = "tool_call"
TOOL_RESULT = "tool_result"
ANSWER = "answer"

CODE = "code"
SEARCH = "search"

CORRECT = "correct"
INCORRECT = "incorrect"
AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class TokenEvent:
    """One generated token with its chosen logprob and top-K alternatives."""

    position: int
    token_text: str
    chosen_logprob: float
    alternatives: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if self.chosen_logprob > 0:
            raise ValidationError(f"chosen_logprob {self.chosen_logprob} > 0")
        mass = 0.0
        prev = None
        for text, lp in self.alternatives:
            if lp > 0:
                raise ValidationError(f"alternative logprob {lp} > 0 for {text!r}")
            if prev is not None and lp > prev:
                raise ValidationError("alternatives not sorted by logprob descending")
            prev = lp
            mass += math.exp(lp)
        if mass > 1 + MASS_TOLERANCE:
            raise ValidationError(f"alternative mass {mass} exceeds 1")
        if all(text != self.token_text for text, _ in self.alternatives):
            raise ValidationError(f"chosen token {self.token_text!r} missing from alternatives")


def ingest_token_event(position: int, token_text: str, chosen_logprob: float,
                       alternatives: Iterable[tuple[str, float]]) -> TokenEvent:
    """Build a validated TokenEvent, normalizing raw endpoint output.

    Sorts alternatives by logprob descending and appends the chosen token
    when the endpoint's top-K list does not already include it.
    """
    alts = sorted(alternatives, key=lambda e: (-e[1], e[0]))
    if all(text != token_text for text, _ in alts):
        alts.append((token_text, chosen_logprob))
        alts.sort(key=lambda e: (-e[1], e[0]))
    return TokenEvent(position=position, token_text=token_text,
                      chosen_logprob=chosen_logprob, alternatives=tuple(alts))


@dataclass(frozen=True)
class Segment:
    """A maximal span of one kind within a trajectory.

    tool_result segments carry zero TokenEvents: their text is injected by
    the episode loop, not generated by the model.
    """

    kind: str
    text: str
    tool: str | None = None
    tokens: tuple[TokenEvent, ...] = ()

    def __post_init__(self):
        if self.kind not in (THINK, TOOL_CALL, TOOL_RESULT, ANSWER):
            raise ValidationError(f"unknown segment kind {self.kind!r}")
        if self.kind in (TOOL_CALL, TOOL_RESULT):
            if self.tool not in (CODE, SEARCH):
                raise ValidationError(f"{self.kind} segment needs tool in {{code, search}}")
        elif self.tool is not None:
            raise ValidationError(f"{self.kind} segment must not carry a tool")
        if self.kind == TOOL_RESULT and self.tokens:
            raise ValidationError("tool_result segments carry no tokens")


@dataclass(frozen=True)
class Origin:
    """Lineage of a trajectory: how it was produced."""

    kind: str  # vanilla | main_chain | branch | sft_reference
    rollout_index: int | None = None
    parent_traj_id: str | None = None
    step_index: int | None = None
    prefix_len: int | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for name in ("rollout_index", "parent_traj_id", "step_index", "prefix_len"):
            value = getattr(self, name)
            if value is not None:
                d[name] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Origin":
        return cls(**d)


MAIN_CHAIN = Origin(kind="main_chain")
SFT_REFERENCE = Origin(kind="sft_reference")


def vanilla_origin(rollout_index: int) -> Origin:
    return Origin(kind="vanilla", rollout_index=rollout_index)


def branch_origin(parent_traj_id: str, step_index: int, prefix_len: int) -> Origin:
    return Origin(kind="branch", parent_traj_id=parent_traj_id,
                  step_index=step_index, prefix_len=prefix_len)


def label_for_score(score: float) -> str:
    """Correct iff score == 1, incorrect iff score == 0, else ambiguous."""
    if score == 1.0:
        return CORRECT
    if score == 0.0:
        return INCORRECT
    return AMBIGUOUS


@dataclass(frozen=True)
class Trajectory:
    traj_id: str
    sample_id: str
    segments: tuple[Segment, ...]
    tool_call_count: int
    per_tool_counts: dict[str, int]
    final_answer: str | None
    score: float
    label: str
    mean_entropy: float
    gen_token_count: int
    origin: Origin

    def with_score(self, score: float) -> "Trajectory":
        return replace(self, score=score, label=label_for_score(score))

    def generated_tokens(self) -> list[TokenEvent]:
        return [tok for seg in self.segments for tok in seg.tokens]


def validate_trajectory(traj: Trajectory, max_calls_per_tool: int = 4) -> None:
    """Check the trajectory invariants; raise ValidationError on violation.

    tool_call_count counts executed tool calls. A call denied by the budget
    still appears as a tool_call segment (its result carries the budget
    marker) but is excluded from the counts, so per-tool counts never exceed
    the budget.
    """
    executed = _executed_call_counts(traj.segments)
    if sum(executed.values()) != traj.tool_call_count:
        raise ValidationError(
            f"tool_call_count {traj.tool_call_count} != executed calls {sum(executed.values())}")
    if dict(traj.per_tool_counts) != executed:
        raise ValidationError(
            f"per_tool_counts {traj.per_tool_counts} != executed {executed}")
    for tool, count in traj.per_tool_counts.items():
        if count > max_calls_per_tool:
            raise ValidationError(f"{tool} used {count} > {max_calls_per_tool} times")
    if traj.label != label_for_score(traj.score):
        raise ValidationError(f"label {traj.label} inconsistent with score {traj.score}")
    if traj.mean_entropy < 0:
        raise ValidationError("mean_entropy must be >= 0")
    _validate_segment_order(traj.segments)


def _validate_segment_order(segments: tuple[Segment, ...]) -> None:
    for i, seg in enumerate(segments):
        if seg.kind == TOOL_CALL:
            nxt = segments[i + 1] if i + 1 < len(segments) else None
            if nxt is None or nxt.kind != TOOL_RESULT or nxt.tool != seg.tool:
                raise ValidationError(
                    f"tool_call at index {i} not followed by matching tool_result")
        if seg.kind == TOOL_RESULT:
            prev = segments[i - 1] if i > 0 else None
            if prev is None or prev.kind != TOOL_CALL or prev.tool != seg.tool:
                raise ValidationError(f"tool_result at index {i} has no matching tool_call")
        if seg.kind == ANSWER and i != len(segments) - 1:
            raise ValidationError("answer segment must be last")
    if sum(1 for s in segments if s.kind == ANSWER) > 1:
        raise ValidationError("at most one answer segment allowed")


BUDGET_EXCEEDED_TEXT = ("tool budget exceeded; no further calls to this tool are "
                        "available. Provide the final answer now.")


def _executed_call_counts(segments: Iterable[Segment]) -> dict[str, int]:
    segments = list(segments)
    counts: dict[str, int] = {}
    for i, seg in enumerate(segments):
        if seg.kind != TOOL_CALL:
            continue
        nxt = segments[i + 1] if i + 1 < len(segments) else None
        denied = nxt is not None and nxt.kind == TOOL_RESULT and nxt.text == BUDGET_EXCEEDED_TEXT
        if not denied:
            counts[seg.tool] = counts.get(seg.tool, 0) + 1
    return counts


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    question: str
    gold_answers: tuple[str, ...]
    task_kind: str  # math | qa
    sft_trajectory: Trajectory | None = None

    def __post_init__(self):
        if not self.gold_answers:
            raise ValidationError(f"sample {self.sample_id}: gold_answers empty")
        if self.task_kind not in ("math", "qa"):
            raise ValidationError(f"sample {self.sample_id}: bad task_kind {self.task_kind!r}")


@dataclass(frozen=True)
class SamplePool:
    """All trajectories sampled for one question.

    correct_fraction excludes ambiguous trajectories (0 < score < 1) from
    both numerator and denominator; it is None when no trajectory is at
    either endpoint.
    """

    sample_id: str
    trajectories: tuple[Trajectory, ...]
    n_correct: int
    n_incorrect: int
    n_ambiguous: int

    def __post_init__(self):
        if not self.trajectories:
            raise ValidationError("SamplePool needs at least one trajectory")
        labels = [t.label for t in self.trajectories]
        counts = (labels.count(CORRECT), labels.count(INCORRECT), labels.count(AMBIGUOUS))
        if counts != (self.n_correct, self.n_incorrect, self.n_ambiguous):
            raise ValidationError(f"pool counts {counts} disagree with fields")
        if any(t.sample_id != self.sample_id for t in self.trajectories):
            raise ValidationError("pool trajectories must share sample_id")

    @property
    def correct_fraction(self) -> float | None:
        denom = self.n_correct + self.n_incorrect
        return self.n_correct / denom if denom > 0 else None


def make_pool(sample_id: str, trajectories: Iterable[Trajectory]) -> SamplePool:
    trajs = tuple(trajectories)
    labels = [t.label for t in trajs]
    return SamplePool(sample_id=sample_id, trajectories=trajs,
                      n_correct=labels.count(CORRECT),
                      n_incorrect=labels.count(INCORRECT),
                      n_ambiguous=labels.count(AMBIGUOUS))


@dataclass(frozen=True)
class PairMeta:
    criteria: str  # Cri1 | Cri2
    set: str  # hard | easy
    strategy: str  # vanilla | entropy
    chosen_tool_calls: int
    rejected_tool_calls: int
    loop_index: int
    chosen_is_sft_fallback: bool

    def to_dict(self) -> dict:
        return {"criteria": self.criteria, "set": self.set, "strategy": self.strategy,
                "chosen_tool_calls": self.chosen_tool_calls,
                "rejected_tool_calls": self.rejected_tool_calls,
                "loop_index": self.loop_index,
                "chosen_is_sft_fallback": self.chosen_is_sft_fallback}


@dataclass(frozen=True)
class PreferencePair:
    pair_id: str
    sample_id: str
    prompt: str
    chosen_text: str
    rejected_text: str
    mask_spans: dict[str, tuple[tuple[int, int], ...]]  # {"chosen": ..., "rejected": ...}
    meta: PairMeta
    # generated-token counts of each side, persisted so the pair validator
    # can re-check length predicates without the logprob sidecar
    chosen_gen_tokens: int = 0
    rejected_gen_tokens: int = 0

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "sample_id": self.sample_id,
                "prompt": self.prompt, "chosen": self.chosen_text,
                "rejected": self.rejected_text,
                "mask_spans": {side: [list(span) for span in spans]
                               for side, spans in self.mask_spans.items()},
                "meta": self.meta.to_dict(),
                "chosen_gen_tokens": self.chosen_gen_tokens,
                "rejected_gen_tokens": self.rejected_gen_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "PreferencePair":
        return cls(pair_id=d["pair_id"], sample_id=d["sample_id"], prompt=d["prompt"],
                   chosen_text=d["chosen"], rejected_text=d["rejected"],
                   mask_spans={side: tuple(tuple(span) for span in spans)
                               for side, spans in d["mask_spans"].items()},
                   meta=PairMeta(**d["meta"]),
                   chosen_gen_tokens=d.get("chosen_gen_tokens", 0),
                   rejected_gen_tokens=d.get("rejected_gen_tokens", 0))


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    loop_index: int
    model_endpoint: str
    config_snapshot: dict
    dataset_paths: dict[str, str]
    metrics: dict[str, float]
    created_at: str

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "loop_index": self.loop_index,
                "model_endpoint": self.model_endpoint,
                "config_snapshot": self.config_snapshot,
                "dataset_paths": dict(self.dataset_paths),
                "metrics": dict(self.metrics), "created_at": self.created_at}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)


# --- tagged wire format ---

_TAG_BY_KEY = {(THINK, None): "think", (TOOL_CALL, CODE): "python",
               (TOOL_CALL, SEARCH): "search", (ANSWER, None): "answer"}
_CALL_TOOL_BY_TAG = {"python": CODE, "search": SEARCH}
TAG_NAMES = ("think", "python", "search", "result", "answer")
_TAG_RE = re.compile(r"</?(think|python|search|result|answer)>")


def escape_result_text(text: str) -> str:
    for name in TAG_NAMES:
        text = text.replace(f"<{name}>", f"&lt;{name}&gt;")
        text = text.replace(f"</{name}>", f"&lt;/{name}&gt;")
    return text


def unescape_result_text(text: str) -> str:
    for name in TAG_NAMES:
        text = text.replace(f"&lt;{name}&gt;", f"<{name}>")
        text = text.replace(f"&lt;/{name}&gt;", f"</{name}>")
    return text


def segment_wire_text(seg: Segment) -> str:
    """The tagged on-the-wire form of one segment."""
    if seg.kind == TOOL_RESULT:
        return f"<result>{escape_result_text(seg.text)}</result>"
    name = _TAG_BY_KEY[(seg.kind, seg.tool)]
    return f"<{name}>{seg.text}</{name}>"


def serialize_segments(segments: Iterable[Segment]) -> tuple[str, tuple[tuple[int, int], ...]]:
    """Serialize segments to wire text; also return tool_result inner spans.

    The returned spans cover exactly the (escaped) tool_result text, for use
    as loss-mask ranges by downstream trainers.
    """
    parts: list[str] = []
    spans: list[tuple[int, int]] = []
    offset = 0
    for seg in segments:
        piece = segment_wire_text(seg)
        if seg.kind == TOOL_RESULT:
            inner_start = offset + len("<result>")
            spans.append((inner_start, offset + len(piece) - len("</result>")))
        parts.append(piece)
        offset += len(piece)
    return "".join(parts), tuple(spans)


def serialize_trajectory(traj: Trajectory) -> str:
    return serialize_segments(traj.segments)[0]


def parse_segments_with_spans(text: str, tolerant: bool = False
                              ) -> list[tuple[Segment, tuple[int, int]]]:
    """Parse wire text into (segment, char span) entries.

    Bare non-whitespace text between tags becomes an implicit think segment.
    With tolerant=True a trailing unclosed tag is closed at end of text and
    ordering checks (call/result pairing, answer last) are skipped; this is
    for salvaging truncated episodes, never for validating stored data.
    """
    out: list[tuple[Segment, tuple[int, int]]] = []
    pos = 0
    while True:
        m = _TAG_RE.search(text, pos)
        if m is None:
            gap = text[pos:]
            if gap.strip():
                out.append((Segment(kind=THINK, text=gap), (pos, len(text))))
            break
        gap = text[pos:m.start()]
        if gap.strip():
            out.append((Segment(kind=THINK, text=gap), (pos, m.start())))
        if m.group(0).startswith("</"):
            raise MalformedTags(m.start(), f"unmatched closing tag {m.group(0)}")
        name = m.group(1)
        closer = _TAG_RE.search(text, m.end())
        if closer is None or closer.group(0) != f"</{name}>":
            if tolerant and closer is None:
                inner, end = text[m.end():], len(text)
            else:
                raise MalformedTags(
                    m.start(), f"<{name}> not closed before next tag")
        else:
            inner, end = text[m.end():closer.start()], closer.end()
        if name == "result":
            seg = Segment(kind=TOOL_RESULT, text=unescape_result_text(inner), tool=CODE)
        elif name in _CALL_TOOL_BY_TAG:
            seg = Segment(kind=TOOL_CALL, text=inner, tool=_CALL_TOOL_BY_TAG[name])
        elif name == "think":
            seg = Segment(kind=THINK, text=inner)
        else:
            seg = Segment(kind=ANSWER, text=inner)
        out.append((seg, (m.start(), end)))
        pos = end
    out = _attach_result_tools(out, tolerant)
    if not tolerant:
        _validate_segment_order(tuple(seg for seg, _ in out))
    return out


def _attach_result_tools(entries, tolerant):
    """Infer each tool_result's tool from the preceding tool_call."""
    fixed = []
    for i, (seg, span) in enumerate(entries):
        if seg.kind == TOOL_RESULT:
            prev = entries[i - 1][0] if i > 0 else None
            if prev is not None and prev.kind == TOOL_CALL:
                seg = replace(seg, tool=prev.tool)
            elif not tolerant:
                raise MalformedTags(span[0], "<result> without preceding tool call")
        fixed.append((seg, span))
    return fixed


def parse_trajectory(text: str, tolerant: bool = False) -> list[Segment]:
    """Parse wire text into a segment skeleton (no TokenEvents)."""
    return [seg for seg, _ in parse_segments_with_spans(text, tolerant=tolerant)]


# --- JSONL persistence ---

def _segment_to_dict(seg: Segment) -> dict:
    d = {"kind": seg.kind, "text": seg.text}
    if seg.tool is not None:
        d["tool"] = seg.tool
    return d


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {"traj_id": traj.traj_id, "sample_id": traj.sample_id,
            "segments": [_segment_to_dict(s) for s in traj.segments],
            "tool_call_count": traj.tool_call_count,
            "per_tool_counts": dict(traj.per_tool_counts),
            "final_answer": traj.final_answer,
            "score": traj.score, "label": traj.label,
            "mean_entropy": traj.mean_entropy,
            "gen_token_count": traj.gen_token_count,
            "origin": traj.origin.to_dict()}


def trajectory_from_dict(d: dict, sidecar_tokens: dict | None = None) -> Trajectory:
    segments = []
    per_segment = (sidecar_tokens or {}).get(d["traj_id"])
    for i, sd in enumerate(d["segments"]):
        tokens: tuple[TokenEvent, ...] = ()
        if per_segment is not None and i < len(per_segment):
            tokens = tuple(
                TokenEvent(position=j, token_text=t[0], chosen_logprob=t[1],
                           alternatives=tuple((a[0], a[1]) for a in t[2]))
                for j, t in enumerate(per_segment[i]))
        segments.append(Segment(kind=sd["kind"], text=sd["text"],
                                tool=sd.get("tool"), tokens=tokens))
    return Trajectory(traj_id=d["traj_id"], sample_id=d["sample_id"],
                      segments=tuple(segments),
                      tool_call_count=d["tool_call_count"],
                      per_tool_counts=dict(d["per_tool_counts"]),
                      final_answer=d.get("final_answer"),
                      score=d["score"], label=d["label"],
                      mean_entropy=d["mean_entropy"],
                      gen_token_count=d["gen_token_count"],
                      origin=Origin.from_dict(d["origin"]))


def dumps_canonical(obj) -> str:
    """Deterministic JSON encoding used for all persisted artifacts."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_trajectories(path, trajectories: Iterable[Trajectory],
                       sidecar_path=None) -> None:
    """Write trajectory JSONL; token logprobs go to the sidecar, if given."""
    trajectories = list(trajectories)
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(dumps_canonical(trajectory_to_dict(traj)) + "\n")
    if sidecar_path is not None:
        with open(sidecar_path, "w", encoding="utf-8") as fh:
            for traj in trajectories:
                row = {"traj_id": traj.traj_id,
                       "segments": [[[t.token_text, t.chosen_logprob,
                                      [[a, lp] for a, lp in t.alternatives]]
                                     for t in seg.tokens]
                                    for seg in traj.segments]}
                fh.write(dumps_canonical(row) + "\n")


def read_trajectories(path, sidecar_path=None) -> list[Trajectory]:
    sidecar: dict | None = None
    if sidecar_path is not None:
        sidecar = {}
        with open(sidecar_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    sidecar[row["traj_id"]] = row["segments"]
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(trajectory_from_dict(json.loads(line), sidecar))
    return out


def sample_record_to_dict(rec: SampleRecord) -> dict:
    d = {"sample_id": rec.sample_id, "question": rec.question,
         "gold_answers": list(rec.gold_answers), "task_kind": rec.task_kind}
    if rec.sft_trajectory is not None:
        d["sft_trajectory"] = trajectory_to_dict(rec.sft_trajectory)
    return d


def sample_record_from_dict(d: dict) -> SampleRecord:
    sft = d.get("sft_trajectory")
    return SampleRecord(sample_id=d["sample_id"], question=d["question"],
                        gold_answers=tuple(d["gold_answers"]),
                        task_kind=d["task_kind"],
                        sft_trajectory=trajectory_from_dict(sft) if sft else None)


def write_sample_records(path, records: Iterable[SampleRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_canonical(sample_record_to_dict(rec)) + "\n")


def read_sample_records(path) -> list[SampleRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(sample_record_from_dict(json.loads(line)))
    return out


def write_pairs(path, pairs: Iterable[PreferencePair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(dumps_canonical(pair.to_dict()) + "\n")


def read_pairs(path) -> list[PreferencePair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(PreferencePair.from_dict(json.loads(line)))
    return out
