"""Scripted mock scenarios and sample sets for tests and demo scripts.

Every scenario follows the continuation contract of the mock gateway: a
rule fires when the text after its regex match is a prefix of the chosen
emission, so resuming from any cut of a previous stream replays the
remainder byte for byte. Branch-divergence scenarios put their stochastic
choice at a rule whose match ends exactly at the context end (residual
empty), so a resumed stream may legally pick a different emission.

Cut-point rules (regexes anchored with $ on a unique marker token) fire
only when a branch resumes at that exact byte position; they precede the
main-path rules so a resumed context takes the branch path.
"""

from __future__ import annotations

import math
import re
from pathlib import Path

from .gateway import Emission, MockScenario, Rule, ScenarioToken, certain_token
from .types import (CODE, Segment, SampleRecord, TOOL_CALL, TOOL_RESULT, THINK,
                    ANSWER, SFT_REFERENCE, Trajectory)

# --- token and distribution builders ---

_FILLER_ALTS = tuple(f"~alt{i}~" for i in range(15))


def dist_with_entropy(text: str, h: float, support: int = 8
                      ) -> tuple[tuple[str, float], ...]:
    """Distribution over `support` strings with entropy h nats, led by text.

    The chosen string gets probability q >= 1/support, the rest split the
    remainder evenly; q is found by bisection (entropy is monotone in q on
    [1/support, 1)).
    """
    if support < 2:
        raise ValueError("support must be >= 2")
    if h <= 0:
        return ((text, 1.0),)
    max_h = math.log(support)
    if h > max_h:
        raise ValueError(f"entropy {h} exceeds ln({support})")
    alts = [a for a in _FILLER_ALTS if a != text][:support - 1]

    def entropy_at(q: float) -> float:
        rest = (1.0 - q) / (support - 1)
        total = -q * math.log(q)
        if rest > 0:
            total -= (support - 1) * rest * math.log(rest)
        return total

    lo, hi = 1.0 / support, 1.0 - 1e-15
    for _ in range(200):
        mid = (lo + hi) / 2
        if entropy_at(mid) > h:
            lo = mid
        else:
            hi = mid
    q = (lo + hi) / 2
    rest = (1.0 - q) / (support - 1)
    dist = [(text, q)] + [(a, rest) for a in alts]
    # exact renormalization so the scenario loader's sum check passes
    total = sum(p for _, p in dist)
    return tuple((t, p / total) for t, p in dist)


def hot_token(text: str, h: float) -> ScenarioToken:
    return ScenarioToken(text=text, dist=dist_with_entropy(text, h))


_TAG_SPLIT = re.compile(r"(</?(?:think|python|search|result|answer)>)")


def tokens_for(text: str, chunk: int = 4) -> tuple[ScenarioToken, ...]:
    """Tokenize text into certain (zero-entropy) tokens, tags kept whole."""
    out = []
    for piece in _TAG_SPLIT.split(text):
        if not piece:
            continue
        if piece.startswith("<"):
            out.append(certain_token(piece))
        else:
            for i in range(0, len(piece), chunk):
                out.append(certain_token(piece[i:i + chunk]))
    return tuple(out)


def filler_tokens(n: int, stem: str, h: float = 0.0) -> tuple[ScenarioToken, ...]:
    texts = [f"{stem}{i % 9}." for i in range(n)]
    if h <= 0:
        return tuple(certain_token(t) for t in texts)
    return tuple(hot_token(t, h) for t in texts)


def emit(*token_groups, weight: float = 1.0, eos: bool = False) -> Emission:
    tokens: list[ScenarioToken] = []
    for group in token_groups:
        if isinstance(group, str):
            tokens.extend(tokens_for(group))
        elif isinstance(group, ScenarioToken):
            tokens.append(group)
        else:
            tokens.extend(group)
    return Emission(tokens=tuple(tokens), weight=weight, eos=eos)


def rule(match: str, *emissions: Emission) -> Rule:
    return Rule(match=match, emissions=tuple(emissions))


def _q(question: str) -> str:
    """Regex matching the question line in any prompt template."""
    return re.escape(f"Question: {question}\n")


# --- single-episode scenarios ---

MATH_SAMPLE = SampleRecord(sample_id="math-1", question="What is 5 plus 3?",
                           gold_answers=("8",), task_kind="math")


def math_episode_scenario() -> MockScenario:
    """Think, one code call whose result is 8, answer 8."""
    return MockScenario(scenario_id="math-episode", rules=(
        rule(_q(MATH_SAMPLE.question),
             emit("<think>add the two numbers</think><python>print(5+3)</python>")),
        rule(re.escape("print(5+3)</python><result>8\n</result>"),
             emit("<answer>8</answer>")),
    ))


QA_SAMPLE = SampleRecord(sample_id="qa-1", question="What is the capital of France?",
                         gold_answers=("Paris",), task_kind="qa")

FIXTURE_CORPUS = (
    ("d1", "France", "Paris is the capital of France."),
    ("d2", "Germany", "Berlin is the capital of Germany."),
    ("d3", "Poetry", "Roses are red and violets are blue."),
)


def write_fixture_corpus(path) -> Path:
    import json
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, title, text in FIXTURE_CORPUS:
            fh.write(json.dumps({"doc_id": doc_id, "title": title, "text": text}) + "\n")
    return path


def qa_episode_scenario() -> MockScenario:
    """Think, one search call over the fixture corpus, answer Paris."""
    return MockScenario(scenario_id="qa-episode", rules=(
        rule(_q(QA_SAMPLE.question),
             emit("<think>look it up</think><search>capital of France</search>")),
        rule(re.escape("capital of France</search><result>(1) France")
             + "[^<]*" + re.escape("</result>"),
             emit("<answer>Paris</answer>")),
    ))


BUDGET_SAMPLE = SampleRecord(sample_id="budget-1", question="Exhaust the search budget.",
                             gold_answers=("done",), task_kind="qa")


def budget_overflow_scenario() -> MockScenario:
    """Five search calls; the fifth is denied by the per-tool budget of 4."""
    rules = [rule(_q(BUDGET_SAMPLE.question), emit("<think>try</think><search>bq1</search>"))]
    for i in range(1, 5):
        rules.append(rule(re.escape(f"bq{i}</search><result>") + "[^<]*"
                          + re.escape("</result>"),
                          emit(f"<search>bq{i + 1}</search>")))
    rules.append(rule(re.escape("bq5</search><result>tool budget exceeded")
                      + "[^<]*" + re.escape("</result>"),
                      emit("<answer>done</answer>")))
    return MockScenario(scenario_id="budget-overflow", rules=tuple(rules))


STOCH_SAMPLE = SampleRecord(sample_id="stoch-1", question="Pick a word.",
                            gold_answers=("alpha",), task_kind="qa")


def stochastic_scenario() -> MockScenario:
    """Weighted emissions at the first rule: rollouts with different seeds diverge."""
    return MockScenario(scenario_id="stochastic", rules=(
        rule(_q(STOCH_SAMPLE.question),
             emit("<think>hmm</think><answer>alpha</answer>", weight=0.5),
             emit("<think>hmm</think><answer>beta</answer>", weight=0.3),
             emit("<think>hmm</think><answer>gamma</answer>", weight=0.2)),
    ))


# --- entropy-profile scenarios ---

RISE_SAMPLE = SampleRecord(sample_id="rise-1", question="What is 6 times 7?",
                           gold_answers=("42",), task_kind="math")


def _triangle(n: int, stem: str, lo: float = 0.05, hi: float = 1.9
              ) -> tuple[ScenarioToken, ...]:
    """n tokens whose entropy rises to a peak mid-run, then falls."""
    out = []
    for i in range(n):
        frac = i / (n - 1)
        h = lo + (hi - lo) * (1 - abs(2 * frac - 1))
        out.append(hot_token(f"{stem}{i % 9}.", h))
    return tuple(out)


def rise_fall_scenario() -> MockScenario:
    """Per-step entropy rises then falls between consecutive tool results."""
    return MockScenario(scenario_id="rise-fall", rules=(
        rule(_q(RISE_SAMPLE.question),
             emit(certain_token("<think>"), _triangle(40, "r"),
                  "</think><python>print(6*7)</python>")),
        rule(re.escape("print(6*7)</python><result>42\n</result>"),
             emit(certain_token("<think>"), _triangle(40, "s"),
                  "</think><answer>42</answer>")),
    ))


CONTRAST_SAMPLE = SampleRecord(sample_id="contrast-1", question="Count the calls.",
                               gold_answers=("51",), task_kind="qa")


def call_count_contrast_scenario() -> MockScenario:
    """Low-entropy chains make one call; high-entropy chains make three."""
    low = emit(certain_token("<think>"), filler_tokens(24, "lo", h=0.1),
               "</think><python>print(51)</python>", weight=0.65)
    high = emit(certain_token("<think>"), filler_tokens(24, "hi", h=1.6),
                "</think><python>print(61)</python>", weight=0.35)
    return MockScenario(scenario_id="call-contrast", rules=(
        rule(_q(CONTRAST_SAMPLE.question), low, high),
        rule(re.escape("print(51)</python><result>51\n</result>"),
             emit("<answer>51</answer>")),
        rule(re.escape("print(61)</python><result>61\n</result>"),
             emit(filler_tokens(8, "ha", h=1.6), "<python>print(62)</python>")),
        rule(re.escape("print(62)</python><result>62\n</result>"),
             emit(filler_tokens(8, "hb", h=1.6), "<python>print(63)</python>")),
        rule(re.escape("print(63)</python><result>63\n</result>"),
             emit("<answer>oops</answer>")),
    ))


# --- cost-ratio scenario ---

COST_SAMPLE = SampleRecord(sample_id="cost-1", question="Compute 11 plus 22.",
                           gold_answers=("33",), task_kind="math")

_CUT_A = "@@cutA@@"
_CUT_B = "@@cutB@@"
_CUT_C = "@@cutC@@"


def cost_scenario() -> MockScenario:
    """512-token main path with three scripted high-entropy cut points.

    The main chain generates 512 tokens (308 before the code call's result,
    204 after). Each eligible step's ten highest-entropy tokens sit at its
    start, so branch planning cuts after token 10 of the two think steps and
    after the full 10-token code call; the $-anchored rules below resume
    those exact prefixes with short completions.
    """
    think1 = ((certain_token("<think>"),)
              + tuple(hot_token(f"t{i}.", 2.0) for i in range(8))
              + (hot_token(_CUT_A, 2.0),)
              + filler_tokens(287, "f", h=0.02))
    call1 = tuple(hot_token(t, 1.0) for t in
                  ("<python>", "print(", "11", "+", "22", ")", "#", "cm", "tx", _CUT_B))
    think2 = ((certain_token("<think>"),)
              + tuple(hot_token(f"u{i}.", 1.5) for i in range(8))
              + (hot_token(_CUT_C, 1.5),)
              + filler_tokens(191, "g", h=0.02))
    return MockScenario(scenario_id="cost-512", rules=(
        # branch resumes, matched only at their exact byte positions
        rule(re.escape(_CUT_A) + "$",
             emit(filler_tokens(210, "ba"), "</think><answer>branchA</answer>")),
        rule(re.escape(_CUT_B) + "$", emit("#b</python>")),
        rule(re.escape("#b</python><result>33\n</result>"),
             emit(certain_token("<think>"), filler_tokens(205, "bb"),
                  "</think><answer>33</answer>")),
        rule(re.escape(_CUT_C) + "$",
             emit(filler_tokens(210, "bc"), "</think><answer>branchC</answer>")),
        # main path
        rule(_q(COST_SAMPLE.question),
             emit(think1, "</think>", call1, certain_token("</python>"))),
        rule(re.escape(_CUT_B + "</python><result>33\n</result>"),
             emit(think2, "</think><answer>33</answer>")),
    ))


# --- self-evolved-loop world ---

def _sft_reference(sample_id: str, k: int) -> Trajectory:
    """Hand-built one-call reference trajectory used as the Cri1 fallback."""
    segments = (
        Segment(kind=THINK, text="reference solution"),
        Segment(kind=TOOL_CALL, text=f"print({k})", tool=CODE),
        Segment(kind=TOOL_RESULT, text=f"{k}\n", tool=CODE),
        Segment(kind=ANSWER, text=str(k)),
    )
    return Trajectory(traj_id=f"{sample_id}-sft", sample_id=sample_id,
                      segments=segments, tool_call_count=1,
                      per_tool_counts={CODE: 1}, final_answer=str(k), score=1.0,
                      label="correct", mean_entropy=0.0, gen_token_count=0,
                      origin=SFT_REFERENCE)


WORLD_KS = {"w-a": 13, "w-b": 17, "w-c": 21}

EASY_SAMPLE = SampleRecord(sample_id="w-easy", question="What color is the sky?",
                           gold_answers=("blue",), task_kind="qa")


def world_samples() -> list[SampleRecord]:
    out = [EASY_SAMPLE]
    for sid, k in sorted(WORLD_KS.items()):
        out.append(SampleRecord(
            sample_id=sid, question=f"Probe {sid}: what does print({k}) show?",
            gold_answers=(str(k),), task_kind="qa",
            sft_trajectory=_sft_reference(sid, k)))
    return out


def eval_samples() -> list[SampleRecord]:
    return [SampleRecord(sample_id=f"{r.sample_id}-eval", question=r.question,
                         gold_answers=r.gold_answers, task_kind=r.task_kind)
            for r in world_samples()]


def world_scenario() -> MockScenario:
    """Multi-question scenario for end-to-end loop runs.

    Each probe question runs a deterministic think + code leg, then picks
    one of three continuations by seed at the result rule: correct 1-call
    answer, a wasted extra search before a wrong answer, or a short wrong
    answer with no further calls.
    """
    rules = [
        # answers only the tool-free baseline prompt for the easy question
        rule(re.escape("Do not call any tools.") + ".*"
             + _q(EASY_SAMPLE.question),
             emit("<think>everyone knows this</think><answer>blue</answer>")),
        rule(_q(EASY_SAMPLE.question),
             emit("<think>no tools needed</think><answer>blue</answer>")),
    ]
    for sid, k in sorted(WORLD_KS.items()):
        question = f"Probe {sid}: what does print({k}) show?"
        rules.append(rule(
            _q(question),
            emit(certain_token("<think>"),
                 tuple(hot_token(f"p{i}.", 1.2) for i in range(10)),
                 filler_tokens(10, "q"),
                 f"</think><python>print({k})</python>")))
        rules.append(rule(
            re.escape(f"print({k})</python><result>{k}\n</result>"),
            emit(f"<think>verify the probe output once more</think>"
                 f"<answer>{k}</answer>", weight=0.35),
            emit(f"<search>more about {sid}</search>", weight=0.45),
            emit("<answer>999</answer>", weight=0.20)))
        rules.append(rule(
            re.escape(f"more about {sid}</search><result>") + "[^<]*"
            + re.escape("</result>"),
            emit("<think>give up on this question entirely</think>"
                 "<answer>999</answer>")))
    return MockScenario(scenario_id="world", rules=tuple(rules))
