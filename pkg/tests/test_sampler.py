import random

import pytest

from tirkit import entropy as ent, fixtures, sampler as sp
from tirkit.errors import NoEligibleSteps, ValidationError
from tirkit.gateway import InProcessClient
from tirkit.toolbox import ToolRunner, LocalSearchIndex
from tirkit.types import (ANSWER, BUDGET_EXCEEDED_TEXT, MAIN_CHAIN, Segment,
                          THINK, TOOL_CALL, TOOL_RESULT, Trajectory,
                          serialize_trajectory, validate_trajectory)

from conftest import think_step
from test_toolbox import DOCS

CFG = sp.SamplerConfig()


def run_fixture_episode(scenario, sample, seed=0, tools=None):
    client = InProcessClient(scenario)
    tools = tools or ToolRunner()
    return sp.run_episode(sample, seed, client, tools, CFG,
                          traj_id=f"{sample.sample_id}-main")


class TestRunEpisode:
    def test_math_episode(self):
        traj, new = run_fixture_episode(fixtures.math_episode_scenario(),
                                        fixtures.MATH_SAMPLE)
        assert traj.final_answer == "8"
        assert traj.tool_call_count == 1 and traj.per_tool_counts == {"code": 1}
        assert [s.kind for s in traj.segments] == \
            [THINK, TOOL_CALL, TOOL_RESULT, ANSWER]
        assert traj.segments[2].text == "8\n"
        validate_trajectory(traj)
        assert new == traj.gen_token_count > 0

    def test_math_wire_round_trip(self):
        traj, _ = run_fixture_episode(fixtures.math_episode_scenario(),
                                      fixtures.MATH_SAMPLE)
        wire = serialize_trajectory(traj)
        assert wire == ("<think>add the two numbers</think>"
                        "<python>print(5+3)</python>"
                        "<result>8\n</result>"
                        "<answer>8</answer>")

    def test_qa_episode(self):
        tools = ToolRunner(search_backend=LocalSearchIndex(DOCS))
        traj, _ = run_fixture_episode(fixtures.qa_episode_scenario(),
                                      fixtures.QA_SAMPLE, tools=tools)
        assert traj.final_answer == "Paris"
        assert traj.per_tool_counts == {"search": 1}

    def test_budget_overflow_episode(self):
        tools = ToolRunner(search_backend=LocalSearchIndex(DOCS))
        traj, _ = run_fixture_episode(fixtures.budget_overflow_scenario(),
                                      fixtures.BUDGET_SAMPLE, tools=tools)
        calls = [s for s in traj.segments if s.kind == TOOL_CALL]
        assert len(calls) == 5
        # the fifth call is denied, not executed
        assert traj.tool_call_count == 4 and traj.per_tool_counts == {"search": 4}
        results = [s for s in traj.segments if s.kind == TOOL_RESULT]
        assert results[-1].text == BUDGET_EXCEEDED_TEXT
        assert traj.final_answer == "done"
        validate_trajectory(traj)

    def test_episode_deterministic(self):
        a, _ = run_fixture_episode(fixtures.stochastic_scenario(),
                                   fixtures.STOCH_SAMPLE, seed=5)
        b, _ = run_fixture_episode(fixtures.stochastic_scenario(),
                                   fixtures.STOCH_SAMPLE, seed=5)
        assert serialize_trajectory(a) == serialize_trajectory(b)
        assert a == b


class TestRolloutVanilla:
    def test_m_must_be_positive(self):
        with pytest.raises(ValidationError):
            sp.rollout_vanilla(fixtures.STOCH_SAMPLE, 0, 0,
                               InProcessClient(fixtures.stochastic_scenario()),
                               ToolRunner(), CFG)

    def test_ten_rollouts_diverge_and_replay(self):
        client = InProcessClient(fixtures.stochastic_scenario())
        first = sp.rollout_vanilla(fixtures.STOCH_SAMPLE, 10, 0, client,
                                   ToolRunner(), CFG)
        second = sp.rollout_vanilla(fixtures.STOCH_SAMPLE, 10, 0, client,
                                    ToolRunner(), CFG)
        answers = {t.final_answer for t in first}
        assert answers <= {"alpha", "beta", "gamma"} and len(answers) > 1
        assert first == second
        assert [t.traj_id for t in first] == \
            [f"stoch-1-vanilla-{i}" for i in range(10)]


def flat_traj(entropies_per_step, traj_id="t1") -> Trajectory:
    segs = tuple(think_step(hs) for hs in entropies_per_step)
    return Trajectory(traj_id=traj_id, sample_id="s1", segments=segs,
                      tool_call_count=0, per_tool_counts={}, final_answer=None,
                      score=0.0, label="incorrect", mean_entropy=0.0,
                      gen_token_count=sum(len(h) for h in entropies_per_step),
                      origin=MAIN_CHAIN)


class TestPlanBranches:
    def test_top_k_by_entropy(self):
        traj = flat_traj([[0.2] * 10, [0.9] * 10, [0.5] * 10, [0.7] * 10])
        plan = sp.plan_branches(traj, k=2, b=2)
        assert [p[0] for p in plan.points] == [1, 3]
        assert plan.branches_per_point == 2

    def test_ties_break_to_earlier_step(self):
        traj = flat_traj([[0.0] * 10, [0.0] * 10, [0.0] * 10])
        plan = sp.plan_branches(traj, k=1, b=1)
        assert plan.points[0][0] == 0

    def test_fewer_steps_than_k(self):
        traj = flat_traj([[0.4] * 10])
        plan = sp.plan_branches(traj, k=3, b=2)
        assert len(plan.points) == 1

    def test_no_eligible_steps(self):
        traj = Trajectory(traj_id="t", sample_id="s1",
                          segments=(Segment(kind=ANSWER, text="x"),),
                          tool_call_count=0, per_tool_counts={}, final_answer="x",
                          score=0.0, label="incorrect", mean_entropy=0.0,
                          gen_token_count=0, origin=MAIN_CHAIN)
        with pytest.raises(NoEligibleSteps):
            sp.plan_branches(traj, k=2, b=2)

    def test_random_plans_match_brute_force(self):
        rng = random.Random(17)
        for _ in range(1000):
            steps = [[rng.uniform(0, 2.4) for _ in range(rng.randint(1, 12))]
                     for _ in range(rng.randint(1, 6))]
            traj = flat_traj(steps)
            k = rng.randint(1, 4)
            plan = sp.plan_branches(traj, k=k, b=1)
            profiles = [ent.step_profile(seg, CFG.prefix_lengths, step_index=i)
                        for i, seg in enumerate(traj.segments)]
            want = sorted(profiles, key=lambda p: (-p.best_h_avg, p.step_index))[:k]
            assert [p[0] for p in plan.points] == [p.step_index for p in want]
            assert [p[1] for p in plan.points] == [p.best_length for p in want]


class TestEntropyGuidedSampling:
    def make_pool(self, seed=0, k=3, b=2):
        client = InProcessClient(fixtures.cost_scenario())
        return sp.sample_for_curation(fixtures.COST_SAMPLE,
                                      sp.EntropyStrategy(k=k, b=b), seed,
                                      client, ToolRunner(), CFG)

    def test_pool_size_bounded_by_k_b(self):
        pool, _ = self.make_pool()
        assert len(pool.trajectories) <= 3 * 2 + 1

    def test_branches_share_parent_prefix(self):
        pool, _ = self.make_pool()
        main = next(t for t in pool.trajectories if t.origin.kind == "main_chain")
        for traj in pool.trajectories:
            if traj.origin.kind != "branch":
                continue
            si, pl = traj.origin.step_index, traj.origin.prefix_len
            assert traj.origin.parent_traj_id == main.traj_id
            for mine, parent in zip(traj.segments[:si], main.segments[:si]):
                assert (mine.kind, mine.text, mine.tool) == \
                    (parent.kind, parent.text, parent.tool)
            # the cut step keeps the parent's first prefix_len tokens
            mine_prefix = [t.token_text for t in traj.segments[si].tokens[:pl]]
            parent_prefix = [t.token_text for t in main.segments[si].tokens[:pl]]
            assert mine_prefix == parent_prefix

    def test_branch_tokens_exclude_copied_prefix(self):
        pool, stats = self.make_pool()
        total_tokens = sum(len(t.generated_tokens()) for t in pool.trajectories)
        assert stats.new_tokens < total_tokens

    def test_replay_is_identical(self):
        a, _ = self.make_pool(seed=4)
        b, _ = self.make_pool(seed=4)
        assert a == b


class TestDeriveSeed:
    def test_distinct_roles_distinct_seeds(self):
        seeds = {sp.derive_seed(0, "s1", role, i)
                 for role in ("main", "vanilla", "branch-0")
                 for i in range(3)}
        assert len(seeds) == 9

    def test_stable_across_calls(self):
        assert sp.derive_seed(42, "s1", "main") == sp.derive_seed(42, "s1", "main")
