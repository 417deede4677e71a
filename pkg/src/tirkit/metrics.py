"""Answer scoring plus tool-use efficiency and necessity metrics.

Correctness is endpoint-only: a trajectory is correct iff its score is
exactly 1 and incorrect iff exactly 0; partial-F1 answers are ambiguous and
count as incorrect wherever a binary judgement is needed.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import requests

from .errors import CoverageMismatch, EmptyResults, JudgeUnavailable
from .types import SamplePool, SampleRecord, Trajectory

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    tokens = [t for t in text.split() if t not in _ARTICLES]
    return " ".join(tokens)


def qa_f1(prediction: str, golds: Iterable[str]) -> float:
    """Token-level F1 after normalization, maximized over gold answers."""
    best = 0.0
    pred_tokens = normalize_answer(prediction).split()
    for gold in golds:
        gold_tokens = normalize_answer(gold).split()
        if not pred_tokens or not gold_tokens:
            best = max(best, float(pred_tokens == gold_tokens))
            continue
        common = Counter(pred_tokens) & Counter(gold_tokens)
        overlap = sum(common.values())
        if overlap == 0:
            continue
        precision = overlap / len(pred_tokens)
        recall = overlap / len(gold_tokens)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


_BOXED_RE = re.compile(r"\\boxed\{")


def extract_boxed(text: str) -> str:
    """Innermost content of the last \\boxed{...}; whole text if absent."""
    last = None
    for m in _BOXED_RE.finditer(text):
        depth = 1
        i = m.end()
        while i < len(text) and depth:
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
            i += 1
        last = text[m.end():i - 1] if depth == 0 else text[m.end():]
    return last if last is not None else text


def _normalize_math(text: str) -> str:
    text = extract_boxed(text).strip()
    text = text.strip("$ \t\n")
    m = re.fullmatch(r"\\text\{(.*)\}", text)
    if m:
        text = m.group(1)
    text = text.replace("\\,", "").replace(" ", "").rstrip(".")
    if text.startswith("{") and text.endswith("}"):
        text = text[1:-1]
    return text


def _as_fraction(text: str) -> Fraction | None:
    m = re.fullmatch(r"\\frac\{(-?[0-9]+)\}\{(-?[0-9]+)\}", text)
    if m:
        text = f"{m.group(1)}/{m.group(2)}"
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        return None


def math_score(prediction: str, gold: str) -> int:
    """Normalized exact match, then rational comparison when both parse."""
    p, g = _normalize_math(prediction), _normalize_math(gold)
    if p == g:
        return 1
    pf, gf = _as_fraction(p), _as_fraction(g)
    if pf is not None and gf is not None:
        return int(pf == gf)
    return 0


class RemoteJudge:
    """Optional remote scorer for math answers, returning {0, 1}."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def score(self, prediction: str, gold: str) -> int:
        try:
            resp = requests.post(self.url, json={"prediction": prediction, "gold": gold},
                                 timeout=self.timeout)
            resp.raise_for_status()
            return int(resp.json()["score"])
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise JudgeUnavailable(f"remote judge failed: {exc}") from exc


def score_answer(prediction: str | None, sample: SampleRecord,
                 judge: RemoteJudge | None = None) -> float:
    """Score one predicted answer against a sample's golds, per task kind."""
    if prediction is None:
        return 0.0
    if sample.task_kind == "math":
        if judge is not None:
            return float(max(judge.score(prediction, g) for g in sample.gold_answers))
        return float(max(math_score(prediction, g) for g in sample.gold_answers))
    return qa_f1(prediction, sample.gold_answers)


# --- run-level metrics ---

@dataclass(frozen=True)
class MethodResult:
    """Per-sample performance and tool-call counts for one method."""

    method_name: str
    records: tuple[tuple[str, float, int], ...]  # (sample_id, performance, tool_calls)

    def __post_init__(self):
        seen = set()
        for sample_id, m, t in self.records:
            if sample_id in seen:
                raise CoverageMismatch(f"duplicate record for sample {sample_id}")
            seen.add(sample_id)
            if not 0 <= m <= 1:
                raise EmptyResults(f"performance {m} outside [0,1]")
            if t < 0:
                raise EmptyResults(f"negative tool calls {t}")

    def by_sample(self) -> dict[str, tuple[float, int]]:
        return {sid: (m, t) for sid, m, t in self.records}


def efficiency(results: MethodResult) -> float:
    """Mean of per-sample performance over tool calls (floor of 1 call).

    A correct answer with zero tool calls is the most efficient outcome, so
    T=0 is guarded with max(T, 1) rather than dropped.
    """
    if not results.records:
        raise EmptyResults("no records")
    return sum(m / max(t, 1) for _, m, t in results.records) / len(results.records)


def necessity(all_methods: Sequence[MethodResult]) -> dict[str, float]:
    """Min-max scaled tendency to underuse tools, per method.

    For each sample, a method earns +1 for every other method that used
    strictly more tool calls yet answered incorrectly (performance < 1) and
    -1 for every other method that used strictly fewer calls and answered
    correctly (performance = 1). Raw scores are the per-sample means,
    min-max scaled across methods; an all-equal degenerate case maps every
    method to 0.5.
    """
    if len(all_methods) < 2:
        raise CoverageMismatch("necessity needs at least two methods")
    tables = {m.method_name: m.by_sample() for m in all_methods}
    names = [m.method_name for m in all_methods]
    if len(set(names)) != len(names):
        raise CoverageMismatch("duplicate method names")
    sample_ids = set(next(iter(tables.values())).keys())
    for name, table in tables.items():
        if set(table.keys()) != sample_ids:
            raise CoverageMismatch(f"method {name} covers different samples")
    if not sample_ids:
        raise EmptyResults("no samples")

    raw: dict[str, float] = {}
    for name in names:
        total = 0
        for sid in sample_ids:
            _, t_self = tables[name][sid]
            n_in = n_co = 0
            for other in names:
                if other == name:
                    continue
                m_o, t_o = tables[other][sid]
                if t_o > t_self and m_o < 1.0:
                    n_in += 1
                if t_o < t_self and m_o == 1.0:
                    n_co += 1
            total += n_in - n_co
        raw[name] = total / len(sample_ids)

    lo, hi = min(raw.values()), max(raw.values())
    if hi == lo:
        return {name: 0.5 for name in names}
    return {name: (value - lo) / (hi - lo) for name, value in raw.items()}


REPORT_CSV_HEADER = ("dataset,method,performance,efficiency,necessity,"
                     "mean_seq_len,mean_tool_calls")


def run_report(pools_by_method: dict[str, list[SamplePool]],
               method_results: Sequence[MethodResult],
               dataset: str = "default") -> tuple[str, str]:
    """Run-level report as (csv_text, human_text).

    Necessity needs at least two methods; with fewer it is reported as
    unavailable ("n/a") rather than raised.
    """
    if len(method_results) >= 2:
        nece = necessity(method_results)
    else:
        nece = {}
    csv_lines = [REPORT_CSV_HEADER]
    human = []
    for result in method_results:
        name = result.method_name
        perf = (sum(m for _, m, _ in result.records) / len(result.records)
                if result.records else 0.0)
        effi = efficiency(result) if result.records else 0.0
        pools = pools_by_method.get(name, [])
        trajs: list[Trajectory] = [t for p in pools for t in p.trajectories]
        mean_len = (sum(t.gen_token_count for t in trajs) / len(trajs)) if trajs else 0.0
        mean_calls = (sum(t.tool_call_count for t in trajs) / len(trajs)) if trajs else 0.0
        nece_cell = f"{nece[name]:.6g}" if name in nece else "n/a"
        csv_lines.append(f"{dataset},{name},{perf:.6g},{effi:.6g},{nece_cell},"
                         f"{mean_len:.6g},{mean_calls:.6g}")
        human.append(f"{name}: performance={perf:.3f} efficiency={effi:.3f} "
                     f"necessity={nece_cell} mean_seq_len={mean_len:.1f} "
                     f"mean_tool_calls={mean_calls:.2f}")
    csv_text = "\n".join(csv_lines) + "\n"
    human_text = (f"Run report ({dataset})\n" + "\n".join(human) + "\n"
                  if human else f"Run report ({dataset})\n")
    return csv_text, human_text
