"""Source-set construction, hard/easy classification, and pair selection.

First-round selection (Cri1) teaches the model to drop redundant tool
calls: the positive is the correct trajectory with the fewest calls (ties
to lowest entropy), the negative an incorrect one with strictly more calls.
Second-round selection (Cri2) additionally rewards necessary calls on easy
samples and longer reasoning on hard ones. All tie-breaks end in traj_id
ascending so curation is deterministic.

Dataset assembly mixes vanilla:entropy pairs 13:7 and hard:easy 2:1 (the
latter applied to the merged dataset), downsizing strata deterministically
under a seed and reporting any shortfall.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .errors import (EmptyDataset, MissingGold, NoLabeledTrajectories,
                     ValidationError)
from .metrics import RemoteJudge, score_answer
from .types import (CORRECT, INCORRECT, PairMeta, PreferencePair, SamplePool,
                    SampleRecord, Trajectory, serialize_segments)

CRI1 = "Cri1"
CRI2 = "Cri2"
HARD = "hard"
EASY = "easy"
DISCARD = "discard"
VANILLA = "vanilla"
ENTROPY = "entropy"


@dataclass(frozen=True)
class CriteriaConfig:
    entropy_hard_max: float = 0.5   # Cri1, entropy strategy: fraction <= -> hard
    vanilla_hard_max: float = 0.4   # Cri1, vanilla strategy: fraction <= -> hard
    vanilla_easy_min: float = 0.7   # Cri1, vanilla strategy: fraction >= -> easy
    hard_easy_ratio: tuple[int, int] = (2, 1)
    strategy_mix: tuple[int, int] = (13, 7)  # vanilla : entropy

    def __post_init__(self):
        if min(self.hard_easy_ratio) <= 0 or min(self.strategy_mix) <= 0:
            raise ValidationError("ratios must be positive")


def build_d_source(sft_rows: list[SampleRecord],
                   no_tool_inferences: dict[str, str | None],
                   judge: RemoteJudge | None = None) -> list[SampleRecord]:
    """Keep exactly the rows the model fails without tools.

    no_tool_inferences maps sample_id to the tool-free predicted answer.
    A row is retained when its prediction scores below 1 against the golds;
    the SFT reference trajectory rides along for the fallback positive.
    """
    out = []
    for row in sft_rows:
        if not row.gold_answers:
            raise MissingGold(f"sample {row.sample_id} has no gold answer")
        prediction = no_tool_inferences.get(row.sample_id)
        if score_answer(prediction, row, judge) < 1.0:
            out.append(row)
    return out


def classify_sample(pool: SamplePool, cfg: CriteriaConfig, criteria: str,
                    strategy: str = ENTROPY) -> str:
    """Classify a pool as hard, easy, or discard.

    Cri1/entropy: correct fraction <= 0.5 is hard, else easy.
    Cri1/vanilla: <= 0.4 hard, >= 0.7 easy, otherwise discard.
    Cri2: hard when correct trajectories number fewer than half the
    incorrect ones, else easy.
    """
    if pool.n_correct + pool.n_incorrect < 1:
        raise NoLabeledTrajectories(f"pool {pool.sample_id} has no labeled trajectory")
    if criteria == CRI2:
        return HARD if pool.n_correct < pool.n_incorrect / 2 else EASY
    fraction = pool.correct_fraction
    if strategy == VANILLA:
        if fraction <= cfg.vanilla_hard_max:
            return HARD
        if fraction >= cfg.vanilla_easy_min:
            return EASY
        return DISCARD
    return HARD if fraction <= cfg.entropy_hard_max else EASY


def _correct(pool: SamplePool) -> list[Trajectory]:
    return [t for t in pool.trajectories if t.label == CORRECT]


def _incorrect(pool: SamplePool) -> list[Trajectory]:
    return [t for t in pool.trajectories if t.label == INCORRECT]


def select_pair_cri1(pool: SamplePool, set_label: str, strategy: str,
                     sample: SampleRecord, loop_index: int = 1
                     ) -> PreferencePair | None:
    """First-round positive/negative selection; None when no pair exists."""
    correct, incorrect = _correct(pool), _incorrect(pool)
    fallback = False
    if strategy == ENTROPY:
        if correct:
            positive = min(correct,
                           key=lambda t: (t.tool_call_count, t.mean_entropy, t.traj_id))
        elif sample.sft_trajectory is not None:
            positive = sample.sft_trajectory
            fallback = True
        else:
            return None
        candidates = [t for t in incorrect if t.tool_call_count > positive.tool_call_count]
        if not candidates:
            return None
        # strongest contrast: the heaviest tool user among qualifying negatives
        negative = min(candidates, key=lambda t: (-t.tool_call_count, t.traj_id))
    else:
        if not correct:
            return None
        positive = min(correct, key=lambda t: (t.gen_token_count, t.traj_id))
        # the emitted-pair contract demands rejected calls > chosen calls for
        # every Cri1 pair, so the length contrast alone does not qualify
        candidates = [t for t in incorrect
                      if t.gen_token_count > positive.gen_token_count
                      and t.tool_call_count > positive.tool_call_count]
        if not candidates:
            return None
        negative = min(candidates, key=lambda t: (-t.gen_token_count, t.traj_id))
    return _make_pair(sample, positive, negative, CRI1, set_label, strategy,
                      loop_index, fallback)


def select_pair_cri2(pool: SamplePool, set_label: str, sample: SampleRecord,
                     strategy: str = ENTROPY, loop_index: int = 2
                     ) -> PreferencePair | None:
    """Second-round selection; None when either side is unsatisfiable."""
    correct, incorrect = _correct(pool), _incorrect(pool)
    if set_label == EASY:
        if not incorrect:
            return None
        negative = min(incorrect, key=lambda t: (-t.tool_call_count, t.traj_id))
        candidates = [t for t in correct if t.tool_call_count < negative.tool_call_count]
        if not candidates:
            return None
        positive = min(candidates,
                       key=lambda t: (t.tool_call_count, t.mean_entropy, t.traj_id))
    else:
        if not correct or not incorrect:
            return None
        positive = min(correct, key=lambda t: (-t.gen_token_count, t.traj_id))
        negative = min(incorrect, key=lambda t: (t.gen_token_count, t.traj_id))
        if not positive.gen_token_count > negative.gen_token_count:
            return None
    return _make_pair(sample, positive, negative, CRI2, set_label, strategy,
                      loop_index, False)


def _make_pair(sample: SampleRecord, positive: Trajectory, negative: Trajectory,
               criteria: str, set_label: str, strategy: str, loop_index: int,
               fallback: bool) -> PreferencePair:
    from .sampler import SamplerConfig
    prompt = SamplerConfig().instruction_template.format(question=sample.question)
    chosen_text, chosen_spans = serialize_segments(positive.segments)
    rejected_text, rejected_spans = serialize_segments(negative.segments)
    return PreferencePair(
        pair_id=f"{sample.sample_id}:{positive.traj_id}:{negative.traj_id}",
        sample_id=sample.sample_id, prompt=prompt,
        chosen_text=chosen_text, rejected_text=rejected_text,
        mask_spans={"chosen": chosen_spans, "rejected": rejected_spans},
        meta=PairMeta(criteria=criteria, set=set_label, strategy=strategy,
                      chosen_tool_calls=positive.tool_call_count,
                      rejected_tool_calls=negative.tool_call_count,
                      loop_index=loop_index, chosen_is_sft_fallback=fallback),
        chosen_gen_tokens=positive.gen_token_count,
        rejected_gen_tokens=negative.gen_token_count)


@dataclass
class AssemblyStats:
    kept: dict[str, int] = field(default_factory=dict)   # per (strategy,set) cell
    dropped_no_pair: int = 0
    shortfalls: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kept": dict(self.kept), "dropped_no_pair": self.dropped_no_pair,
                "shortfalls": list(self.shortfalls)}


def _largest_remainder(total: int, weights: list[float]) -> list[int]:
    exact = [total * w for w in weights]
    base = [int(x) for x in exact]
    rest = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: -(exact[i] - base[i]))
    for i in order[:rest]:
        base[i] += 1
    return base


def assemble_dataset(pairs: list[PreferencePair], cfg: CriteriaConfig, seed: int
                     ) -> tuple[list[PreferencePair], AssemblyStats]:
    """Deterministic seeded subsample approximating both target ratios.

    When all four (strategy, set) cells are populated, the joint cell
    fractions implied by 13:7 and 2:1 pick the largest feasible dataset.
    With a missing stratum the achievable dimension is enforced alone and
    the shortfall reported.
    """
    if not pairs:
        raise EmptyDataset("no pairs to assemble")
    stats = AssemblyStats()
    cells: dict[tuple[str, str], list[PreferencePair]] = {}
    for p in pairs:
        cells.setdefault((p.meta.strategy, p.meta.set), []).append(p)
    for members in cells.values():
        members.sort(key=lambda p: p.pair_id)

    v, e = cfg.strategy_mix
    h, ez = cfg.hard_easy_ratio
    strategies = {s for s, _ in cells}
    sets = {t for _, t in cells}

    all_cells = [(VANILLA, HARD), (VANILLA, EASY), (ENTROPY, HARD), (ENTROPY, EASY)]
    buckets: dict[tuple[str, str], list[PreferencePair]] = {}
    weights: dict[tuple[str, str], float] = {}
    if all(key in cells for key in all_cells):
        buckets = cells
        for (s, t) in all_cells:
            ws = v / (v + e) if s == VANILLA else e / (v + e)
            wt = h / (h + ez) if t == HARD else ez / (h + ez)
            weights[(s, t)] = ws * wt
    elif strategies == {VANILLA, ENTROPY} and sets == {HARD, EASY}:
        # both dimensions occur but a joint cell is empty: enforce the
        # hard:easy ratio on the merged pool, report the mix as partial
        for t in (HARD, EASY):
            buckets[("*", t)] = sorted(
                (p for key, ps in cells.items() if key[1] == t for p in ps),
                key=lambda p: p.pair_id)
            weights[("*", t)] = h / (h + ez) if t == HARD else ez / (h + ez)
        stats.shortfalls.append("empty joint stratum; 13:7 mix not enforced")
    elif strategies == {VANILLA, ENTROPY}:
        only_set = next(iter(sets))
        buckets[(VANILLA, only_set)] = cells[(VANILLA, only_set)]
        buckets[(ENTROPY, only_set)] = cells[(ENTROPY, only_set)]
        weights[(VANILLA, only_set)] = v / (v + e)
        weights[(ENTROPY, only_set)] = e / (v + e)
        stats.shortfalls.append(f"single set stratum {only_set!r}; 2:1 unachievable")
    elif sets == {HARD, EASY}:
        only_strategy = next(iter(strategies))
        buckets[(only_strategy, HARD)] = cells[(only_strategy, HARD)]
        buckets[(only_strategy, EASY)] = cells[(only_strategy, EASY)]
        weights[(only_strategy, HARD)] = h / (h + ez)
        weights[(only_strategy, EASY)] = ez / (h + ez)
        stats.shortfalls.append(
            f"single strategy stratum {only_strategy!r}; 13:7 unachievable")
    else:
        key = next(iter(cells))
        buckets[key] = cells[key]
        weights[key] = 1.0
        stats.shortfalls.append("single stratum; no ratio enforceable")

    # largest total for which every cell can supply its share
    keys = sorted(weights)
    total = min(int(len(buckets[key]) / weights[key]) for key in keys)
    counts = _largest_remainder(total, [weights[k] for k in keys])
    # largest-remainder rounding can nudge one cell past its supply
    while any(c > len(buckets[k]) for k, c in zip(keys, counts)):
        total -= 1
        counts = _largest_remainder(total, [weights[k] for k in keys])
    if total <= 0:
        raise EmptyDataset("ratio targets cannot be met with any pair")

    chosen: list[PreferencePair] = []
    for key, count in zip(keys, counts):
        members = list(buckets[key])
        rng = random.Random(f"{seed}|{key[0]}|{key[1]}")
        rng.shuffle(members)
        kept = sorted(members[:count], key=lambda p: p.pair_id)
        stats.kept[f"{key[0]}/{key[1]}"] = len(kept)
        if count < len(members):
            stats.shortfalls.append(
                f"cell {key[0]}/{key[1]}: kept {count} of {len(members)}")
        chosen.extend(kept)
    chosen.sort(key=lambda p: p.pair_id)
    return chosen, stats


def validate_pairs(pairs: list[PreferencePair]) -> list[str]:
    """Independent re-check of every emitted pair's predicates.

    Returns human-readable violation strings; empty means the file is clean.
    This pass trusts only the serialized pair contents, not the selection
    code that produced them.
    """
    violations = []
    for p in pairs:
        meta = p.meta
        where = f"pair {p.pair_id}"
        chosen_calls = _recount_calls(p.chosen_text, meta.chosen_tool_calls, where,
                                      "chosen", violations)
        rejected_calls = _recount_calls(p.rejected_text, meta.rejected_tool_calls,
                                        where, "rejected", violations)
        if meta.criteria == CRI1:
            if not rejected_calls > chosen_calls:
                violations.append(f"{where}: Cri1 requires rejected calls > chosen calls")
        elif meta.criteria == CRI2 and meta.set == EASY:
            if not chosen_calls < rejected_calls:
                violations.append(f"{where}: Cri2-easy requires chosen calls < rejected calls")
        elif meta.criteria == CRI2 and meta.set == HARD:
            if not p.chosen_gen_tokens > p.rejected_gen_tokens:
                violations.append(f"{where}: Cri2-hard requires chosen length > rejected length")
        else:
            violations.append(f"{where}: unknown criteria/set {meta.criteria}/{meta.set}")
        violations.extend(_check_mask_spans(p))
    return violations


def _recount_calls(text: str, declared: int, where: str, side: str,
                   violations: list[str]) -> int:
    """Recompute executed tool calls from the wire text itself."""
    from .types import _executed_call_counts, parse_trajectory

    try:
        counts = _executed_call_counts(parse_trajectory(text))
    except ValidationError as exc:
        violations.append(f"{where}: {side} text does not parse: {exc}")
        return declared
    total = sum(counts.values())
    if total != declared:
        violations.append(f"{where}: {side} declares {declared} tool calls, text has {total}")
    return total


def _check_mask_spans(p: PreferencePair) -> list[str]:
    out = []
    for side, text in (("chosen", p.chosen_text), ("rejected", p.rejected_text)):
        spans = p.mask_spans.get(side, ())
        expected = _result_spans(text)
        if tuple(spans) != expected:
            out.append(f"pair {p.pair_id}: {side} mask spans {spans} != "
                       f"tool_result spans {expected}")
    return out


def _result_spans(text: str) -> tuple[tuple[int, int], ...]:
    import re
    return tuple((m.start() + len("<result>"), m.end() - len("</result>"))
                 for m in re.finditer(r"<result>.*?</result>", text, flags=re.DOTALL))
