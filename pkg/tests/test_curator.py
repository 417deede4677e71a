import random
from dataclasses import replace

import pytest

from tirkit import curator as cu
from tirkit.errors import EmptyDataset, NoLabeledTrajectories, ValidationError
from tirkit.types import PairMeta, PreferencePair, make_pool

from conftest import make_sample, make_traj

CFG = cu.CriteriaConfig()


def pool_from_counts(correct_calls, incorrect_calls, *, correct_entropies=None,
                     correct_tokens=None, incorrect_tokens=None, sample_id="s1"):
    """Pool with one trajectory per listed call count."""
    trajs = []
    for i, calls in enumerate(correct_calls):
        trajs.append(make_traj(sample_id=sample_id, traj_id=f"c{i}",
                               code_calls=calls, score=1.0,
                               mean_entropy=(correct_entropies or [0.5] * 9)[i],
                               gen_tokens=(correct_tokens or [50] * 9)[i]))
    for i, calls in enumerate(incorrect_calls):
        trajs.append(make_traj(sample_id=sample_id, traj_id=f"i{i}",
                               code_calls=calls, score=0.0,
                               gen_tokens=(incorrect_tokens or [50] * 9)[i]))
    return make_pool(sample_id, trajs)


def label_pool(n_correct, n_incorrect, n_ambiguous=0, sample_id="s1"):
    trajs = [make_traj(sample_id=sample_id, traj_id=f"c{i}", score=1.0)
             for i in range(n_correct)]
    trajs += [make_traj(sample_id=sample_id, traj_id=f"i{i}", score=0.0)
              for i in range(n_incorrect)]
    trajs += [make_traj(sample_id=sample_id, traj_id=f"a{i}", score=0.5)
              for i in range(n_ambiguous)]
    return make_pool(sample_id, trajs)


class TestBuildDSource:
    def test_keeps_only_unsolved_rows(self):
        rows = [make_sample("a", gold="8"), make_sample("b", gold="9"),
                make_sample("c", gold="10")]
        inferences = {"a": "8", "b": "wrong", "c": None}
        kept = cu.build_d_source(rows, inferences)
        assert [r.sample_id for r in kept] == ["b", "c"]

    def test_all_solved_is_empty(self):
        rows = [make_sample("a", gold="8")]
        assert cu.build_d_source(rows, {"a": "8"}) == []

    def test_no_rows_is_empty(self):
        assert cu.build_d_source([], {}) == []


class TestClassifySample:
    def test_cri1_entropy_thresholds(self):
        assert cu.classify_sample(label_pool(3, 7), CFG, cu.CRI1, cu.ENTROPY) == cu.HARD
        assert cu.classify_sample(label_pool(5, 5), CFG, cu.CRI1, cu.ENTROPY) == cu.HARD
        assert cu.classify_sample(label_pool(6, 4), CFG, cu.CRI1, cu.ENTROPY) == cu.EASY

    def test_cri1_vanilla_three_way(self):
        assert cu.classify_sample(label_pool(4, 6), CFG, cu.CRI1, cu.VANILLA) == cu.HARD
        assert cu.classify_sample(label_pool(5, 5), CFG, cu.CRI1, cu.VANILLA) == cu.DISCARD
        assert cu.classify_sample(label_pool(7, 3), CFG, cu.CRI1, cu.VANILLA) == cu.EASY

    def test_cri2_half_rule(self):
        assert cu.classify_sample(label_pool(3, 7), CFG, cu.CRI2) == cu.HARD
        assert cu.classify_sample(label_pool(4, 7), CFG, cu.CRI2) == cu.EASY
        assert cu.classify_sample(label_pool(5, 10), CFG, cu.CRI2) == cu.EASY

    def test_ambiguous_only_pool_rejected(self):
        pool = make_pool("s1", [make_traj(score=0.5)])
        with pytest.raises(NoLabeledTrajectories):
            cu.classify_sample(pool, CFG, cu.CRI1)

    def test_ambiguous_excluded_from_fraction(self):
        # 1 correct, 1 incorrect, 8 ambiguous: fraction is 0.5, hard
        pool = label_pool(1, 1, n_ambiguous=8)
        assert cu.classify_sample(pool, CFG, cu.CRI1, cu.ENTROPY) == cu.HARD


class TestSelectPairCri1:
    def test_entropy_min_calls_vs_max_calls(self):
        pool = pool_from_counts([1, 2], [2, 3])
        pair = cu.select_pair_cri1(pool, cu.HARD, cu.ENTROPY, make_sample())
        assert pair.meta.chosen_tool_calls == 1
        assert pair.meta.rejected_tool_calls == 3

    def test_entropy_tie_broken_by_mean_entropy(self):
        pool = pool_from_counts([1, 1], [2], correct_entropies=[0.9, 0.1])
        pair = cu.select_pair_cri1(pool, cu.HARD, cu.ENTROPY, make_sample())
        assert pair.pair_id.split(":")[1] == "c1"

    def test_no_heavier_negative_yields_none(self):
        pool = pool_from_counts([2], [1, 2])
        assert cu.select_pair_cri1(pool, cu.HARD, cu.ENTROPY, make_sample()) is None

    def test_sft_fallback_used_when_no_correct(self):
        sft = make_traj(traj_id="sft", code_calls=1, score=1.0)
        sample = make_sample(sft=sft)
        pool = pool_from_counts([], [2, 3])
        pair = cu.select_pair_cri1(pool, cu.HARD, cu.ENTROPY, sample)
        assert pair.meta.chosen_is_sft_fallback
        assert pair.meta.chosen_tool_calls == 1
        assert pair.meta.rejected_tool_calls == 3

    def test_no_correct_no_sft_yields_none(self):
        pool = pool_from_counts([], [2, 3])
        assert cu.select_pair_cri1(pool, cu.HARD, cu.ENTROPY, make_sample()) is None

    def test_vanilla_uses_sequence_length(self):
        pool = pool_from_counts([1, 1], [2, 2], correct_tokens=[40, 60],
                                incorrect_tokens=[90, 30])
        pair = cu.select_pair_cri1(pool, cu.EASY, cu.VANILLA, make_sample())
        assert pair.chosen_gen_tokens == 40
        assert pair.rejected_gen_tokens == 90

    def test_vanilla_no_longer_negative_yields_none(self):
        pool = pool_from_counts([1], [2], correct_tokens=[100],
                                incorrect_tokens=[50])
        assert cu.select_pair_cri1(pool, cu.EASY, cu.VANILLA, make_sample()) is None

    def test_vanilla_negative_needs_more_calls_too(self):
        pool = pool_from_counts([1], [1], correct_tokens=[40],
                                incorrect_tokens=[90])
        assert cu.select_pair_cri1(pool, cu.EASY, cu.VANILLA, make_sample()) is None


class TestSelectPairCri2:
    def test_easy_contrasts_call_counts(self):
        pool = pool_from_counts([1, 3], [2, 4], correct_entropies=[0.4, 0.2])
        pair = cu.select_pair_cri2(pool, cu.EASY, make_sample())
        assert pair.meta.rejected_tool_calls == 4
        assert pair.meta.chosen_tool_calls == 1

    def test_easy_requires_strictly_fewer_calls(self):
        pool = pool_from_counts([3, 4], [2, 3])
        assert cu.select_pair_cri2(pool, cu.EASY, make_sample()) is None

    def test_hard_contrasts_lengths(self):
        pool = pool_from_counts([1, 1], [1, 1], correct_tokens=[300, 500],
                                incorrect_tokens=[200, 450])
        pair = cu.select_pair_cri2(pool, cu.HARD, make_sample())
        assert pair.chosen_gen_tokens == 500
        assert pair.rejected_gen_tokens == 200

    def test_hard_requires_longer_positive(self):
        pool = pool_from_counts([1], [1], correct_tokens=[100],
                                incorrect_tokens=[200])
        assert cu.select_pair_cri2(pool, cu.HARD, make_sample()) is None

    def test_hard_needs_both_labels(self):
        assert cu.select_pair_cri2(pool_from_counts([1], []), cu.HARD,
                                   make_sample()) is None
        assert cu.select_pair_cri2(pool_from_counts([], [1]), cu.HARD,
                                   make_sample()) is None


class TestSelectedPairsAreValid:
    def test_random_pools_produce_clean_pairs(self, rng):
        produced = 0
        for trial in range(200):
            n_c, n_i = rng.randint(0, 4), rng.randint(0, 4)
            if n_c + n_i == 0:
                continue
            pool = pool_from_counts(
                [rng.randint(0, 4) for _ in range(n_c)],
                [rng.randint(0, 4) for _ in range(n_i)],
                correct_tokens=[rng.randint(10, 500) for _ in range(n_c)],
                incorrect_tokens=[rng.randint(10, 500) for _ in range(n_i)],
                sample_id=f"s{trial}")
            sample = make_sample(f"s{trial}")
            for pair in (cu.select_pair_cri1(pool, cu.HARD, cu.ENTROPY, sample),
                         cu.select_pair_cri1(pool, cu.HARD, cu.VANILLA, sample),
                         cu.select_pair_cri2(pool, cu.EASY, sample),
                         cu.select_pair_cri2(pool, cu.HARD, sample)):
                if pair is not None:
                    produced += 1
                    assert cu.validate_pairs([pair]) == []
        assert produced > 50


def mk_pair(i: int, strategy: str, set_label: str, criteria: str = cu.CRI1
            ) -> PreferencePair:
    meta = PairMeta(criteria=criteria, set=set_label, strategy=strategy,
                    chosen_tool_calls=0, rejected_tool_calls=1,
                    loop_index=1, chosen_is_sft_fallback=False)
    return PreferencePair(pair_id=f"{strategy}-{set_label}-{i:04d}", sample_id=f"s{i}",
                          prompt="q", chosen_text="<answer>1</answer>",
                          rejected_text="<answer>2</answer>",
                          mask_spans={"chosen": (), "rejected": ()}, meta=meta)


class TestAssembleDataset:
    def test_balanced_supply_all_kept(self):
        pairs = [mk_pair(i, cu.VANILLA, cu.HARD) for i in range(130)] + \
                [mk_pair(i, cu.ENTROPY, cu.HARD) for i in range(70)]
        chosen, stats = cu.assemble_dataset(pairs, CFG, seed=0)
        assert len(chosen) == 200
        assert stats.kept == {"vanilla/hard": 130, "entropy/hard": 70}

    def test_oversupply_trimmed_to_ratio(self):
        pairs = [mk_pair(i, cu.VANILLA, cu.HARD) for i in range(200)] + \
                [mk_pair(i, cu.ENTROPY, cu.HARD) for i in range(70)]
        chosen, stats = cu.assemble_dataset(pairs, CFG, seed=0)
        assert stats.kept == {"vanilla/hard": 130, "entropy/hard": 70}
        v = sum(1 for p in chosen if p.meta.strategy == cu.VANILLA)
        e = len(chosen) - v
        assert abs(v / 13 - e / 7) * 13 <= 1  # 13:7 within one pair

    def test_hard_easy_trimmed_to_ratio(self):
        pairs = [mk_pair(i, cu.VANILLA, cu.HARD) for i in range(10)] + \
                [mk_pair(i, cu.VANILLA, cu.EASY) for i in range(10)]
        chosen, stats = cu.assemble_dataset(pairs, CFG, seed=0)
        assert stats.kept == {"vanilla/hard": 10, "vanilla/easy": 5}
        assert len(chosen) == 15

    def test_four_cell_joint_ratio(self):
        pairs = []
        for n, strategy, set_label in ((26, cu.VANILLA, cu.HARD),
                                       (13, cu.VANILLA, cu.EASY),
                                       (14, cu.ENTROPY, cu.HARD),
                                       (7, cu.ENTROPY, cu.EASY)):
            pairs += [mk_pair(i, strategy, set_label) for i in range(n)]
        chosen, stats = cu.assemble_dataset(pairs, CFG, seed=1)
        assert stats.kept == {"vanilla/hard": 26, "vanilla/easy": 13,
                              "entropy/hard": 14, "entropy/easy": 7}
        hard = sum(1 for p in chosen if p.meta.set == cu.HARD)
        assert abs(hard - 2 * (len(chosen) - hard)) <= 1

    def test_empty_joint_cell_falls_back_to_merged_ratio(self):
        pairs = [mk_pair(i, cu.VANILLA, cu.HARD) for i in range(8)] + \
                [mk_pair(i, cu.ENTROPY, cu.EASY) for i in range(4)]
        chosen, stats = cu.assemble_dataset(pairs, CFG, seed=0)
        assert "empty joint stratum; 13:7 mix not enforced" in stats.shortfalls
        hard = sum(1 for p in chosen if p.meta.set == cu.HARD)
        easy = len(chosen) - hard
        assert abs(hard - 2 * easy) <= 1

    def test_single_stratum_passes_through(self):
        pairs = [mk_pair(i, cu.ENTROPY, cu.HARD) for i in range(5)]
        chosen, stats = cu.assemble_dataset(pairs, CFG, seed=0)
        assert len(chosen) == 5
        assert stats.shortfalls == ["single stratum; no ratio enforceable"]

    def test_deterministic_under_seed(self):
        pairs = [mk_pair(i, cu.VANILLA, cu.HARD) for i in range(50)] + \
                [mk_pair(i, cu.VANILLA, cu.EASY) for i in range(50)]
        a, _ = cu.assemble_dataset(pairs, CFG, seed=3)
        b, _ = cu.assemble_dataset(pairs, CFG, seed=3)
        assert a == b
        c, _ = cu.assemble_dataset(pairs, CFG, seed=4)
        assert len(c) == len(a)

    def test_output_sorted_by_pair_id(self):
        pairs = [mk_pair(i, cu.VANILLA, cu.HARD) for i in range(20)]
        chosen, _ = cu.assemble_dataset(pairs, CFG, seed=0)
        assert [p.pair_id for p in chosen] == sorted(p.pair_id for p in chosen)

    def test_empty_input_rejected(self):
        with pytest.raises(EmptyDataset):
            cu.assemble_dataset([], CFG, seed=0)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValidationError):
            cu.CriteriaConfig(hard_easy_ratio=(0, 1))


class TestValidatePairs:
    def clean_pair(self):
        pool = pool_from_counts([1], [3])
        return cu.select_pair_cri1(pool, cu.HARD, cu.ENTROPY, make_sample())

    def test_clean_pair_passes(self):
        assert cu.validate_pairs([self.clean_pair()]) == []

    def test_wrong_declared_calls_flagged(self):
        pair = self.clean_pair()
        bad = replace(pair, meta=replace(pair.meta, chosen_tool_calls=9))
        assert any("declares 9 tool calls" in v for v in cu.validate_pairs([bad]))

    def test_cri1_call_ordering_enforced(self):
        pool = pool_from_counts([1], [3])
        pair = cu.select_pair_cri1(pool, cu.HARD, cu.ENTROPY, make_sample())
        flipped = replace(pair, chosen_text=pair.rejected_text,
                          rejected_text=pair.chosen_text,
                          mask_spans={"chosen": pair.mask_spans["rejected"],
                                      "rejected": pair.mask_spans["chosen"]},
                          meta=replace(pair.meta,
                                       chosen_tool_calls=pair.meta.rejected_tool_calls,
                                       rejected_tool_calls=pair.meta.chosen_tool_calls))
        assert any("rejected calls > chosen calls" in v
                   for v in cu.validate_pairs([flipped]))

    def test_bad_mask_spans_flagged(self):
        pair = self.clean_pair()
        bad = replace(pair, mask_spans={"chosen": ((0, 1),),
                                        "rejected": pair.mask_spans["rejected"]})
        assert any("mask spans" in v for v in cu.validate_pairs([bad]))

    def test_cri2_hard_length_enforced(self):
        pool = pool_from_counts([1], [1], correct_tokens=[300],
                                incorrect_tokens=[100])
        pair = cu.select_pair_cri2(pool, cu.HARD, make_sample())
        bad = replace(pair, chosen_gen_tokens=50)
        assert any("chosen length > rejected length" in v
                   for v in cu.validate_pairs([bad]))
