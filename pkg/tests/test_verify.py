"""Tests for the verification suites and value curves.

Sections:
1. Critic quality - discrimination, ranking, value curves on a trained chain
2. Ablation - contrastive term on vs off, scored on held-out trajectories
3. Structural suites - gradients, isolation, packing, sharding
4. Suite runner - ordering, goal checks, skipped suites
5. Acceptance - occupancy residual on a long-horizon grid
"""

import numpy as np
import pytest

from crl.encoders import TrainConfig, corpus_samples, init_params, train
from crl.errors import ValidationError
from crl.testbed import (
    Corpus,
    CorpusConfig,
    expert_policy,
    expert_rollout,
    generate_corpus,
    occupancy_oracle,
    split_corpus,
)
from crl.verify import (
    VerifyConfig,
    crl_ablation,
    discrimination_suite,
    gradient_suite,
    heldout_probe,
    isolation_suite,
    occupancy_residual_suite,
    packing_suite,
    ranking_suite,
    run_suites,
    shard_suite,
    value_curve,
)

SMALL_VERIFY = VerifyConfig(verify_gradient_instances=3, verify_mask_sequences=5, verify_pack_batches=5,
                            verify_shard_counts=(1, 2, 4), verify_shard_batch=16)

SUITE_ORDER = ["occupancy_residual", "ranking", "goal_discrimination", "gradient", "isolation",
               "packing", "shard"]


def fresh_params(corpus, **overrides):
    config = TrainConfig(gamma=0.9, **overrides)
    mdp = corpus.mdp
    return init_params(mdp.num_states + mdp.num_actions, [g.goal_id for g in corpus.goals], config)


# =============================================================================
# Critic quality
# =============================================================================


class TestCriticQuality:

    def test_trained_critic_discriminates_goals(self, trained_chain):
        corpus, _, result = trained_chain
        assert discrimination_suite(result.params, corpus).passed

    def test_value_curve_prefers_the_correct_goal(self, trained_chain):
        corpus, _, result = trained_chain
        for traj in corpus.trajectories:
            wrong = 1 - traj.goal_id
            curve = value_curve(result.params, corpus.mdp, traj, traj.goal_id, wrong)
            assert curve[:, 0].tolist() == list(range(1, traj.length + 1))
            assert np.all(curve[:, 1] >= curve[:, 2])
            if traj.length > 1:
                assert curve[-1, 1] > curve[0, 1]

    def test_same_goal_gives_identical_curves(self, chain_corpus):
        params = fresh_params(chain_corpus)
        curve = value_curve(params, chain_corpus.mdp, chain_corpus.trajectories[0], 0, 0)
        np.testing.assert_array_equal(curve[:, 1], curve[:, 2])

    def test_untrained_critic_fails_ranking(self, chain_corpus):
        result = ranking_suite(fresh_params(chain_corpus), chain_corpus, 0.9, 0.99)
        assert not result.passed

    def test_value_curve_on_fresh_start_states(self, trained_chain):
        corpus, _, result = trained_chain
        mdp = corpus.mdp
        policy = expert_policy(mdp)
        distances = {g: mdp.goal_distances(g) for g in mdp.goal_ids}
        checked = 0
        for goal_id in mdp.goal_ids:
            wrong = next(g for g in mdp.goal_ids if g != goal_id)
            used = {t.states[0] for t in corpus.trajectories_for(goal_id)}
            own = distances[goal_id]
            for start in range(mdp.num_states):
                if start in used or own[start] < 2 or distances[wrong][start] <= own[start]:
                    continue
                traj = expert_rollout(mdp, policy, start, goal_id)
                curve = value_curve(result.params, mdp, traj, goal_id, wrong)
                assert np.all(curve[:, 1] >= curve[:, 2]), f"start {start}"
                assert curve[-1, 1] > curve[0, 1], f"start {start}"
                checked += 1
        assert checked > 0


# =============================================================================
# Ablation
# =============================================================================


@pytest.fixture(scope="module")
def ablation():
    corpus = generate_corpus(CorpusConfig(family="chain", num_tasks=2, trajectories_per_task=6, size=24,
                                          gamma=0.9, seed=0))
    config = TrainConfig(gamma=0.9, steps=3000, learning_rate=1e-2, seed=0, log_every=0)
    return corpus, crl_ablation(corpus, config, heldout_per_task=2)


class TestAblation:

    def test_contrastive_term_beats_no_contrastive_term(self, ablation):
        _, result = ablation
        assert result.with_crl == 1.0
        assert result.with_crl > result.without_crl

    def test_heldout_samples_come_from_unused_starts(self, ablation):
        corpus, result = ablation
        train_split, heldout = split_corpus(corpus, heldout_per_task=2)
        assert result.train_trajectories == len(train_split.trajectories)
        assert result.heldout_samples == sum(t.length for t in heldout.trajectories) > 0
        for goal_id in corpus.mdp.goal_ids:
            train_starts = {t.states[0] for t in train_split.trajectories_for(goal_id)}
            held_starts = {t.states[0] for t in heldout.trajectories_for(goal_id)}
            assert train_starts and held_starts
            assert not train_starts & held_starts

    def test_zero_lambda_is_rejected(self, chain_corpus):
        with pytest.raises(ValidationError):
            crl_ablation(chain_corpus, TrainConfig(gamma=0.9, lambda_crl=0.0))

    def test_empty_heldout_split(self, chain_corpus):
        empty = Corpus(chain_corpus.config, chain_corpus.mdp, chain_corpus.goals, [])
        with pytest.raises(ValidationError):
            heldout_probe(empty)


# =============================================================================
# Structural suites
# =============================================================================


class TestStructuralSuites:

    def test_gradient_suite(self):
        result = gradient_suite(SMALL_VERIFY, 0.9)
        assert result.passed, result.detail
        assert result.statistic < 1e-5

    def test_isolation_suite(self):
        result = isolation_suite(SMALL_VERIFY)
        assert result.passed, result.detail

    def test_packing_suite(self):
        result = packing_suite(SMALL_VERIFY)
        assert result.passed
        assert result.statistic <= 1e-12

    def test_shard_suite(self, chain_corpus):
        params = fresh_params(chain_corpus, init_scale=0.3)
        result = shard_suite(params, chain_corpus, TrainConfig(gamma=0.9), SMALL_VERIFY)
        assert result.passed, result.detail
        assert "4 shards" in result.detail


# =============================================================================
# Suite runner
# =============================================================================


class TestRunSuites:

    def test_suites_run_in_fixed_order(self, trained_chain):
        corpus, config, result = trained_chain
        results = run_suites(result.params, corpus, config, SMALL_VERIFY)
        assert [r.suite for r in results] == SUITE_ORDER
        assert all(r.to_dict()["suite"] == r.suite for r in results)

    def test_mismatched_goals_are_rejected(self, chain_corpus):
        config = TrainConfig(gamma=0.9)
        params = init_params(chain_corpus.mdp.num_states + 2, [5, 6], config)
        with pytest.raises(ValidationError):
            run_suites(params, chain_corpus, config, SMALL_VERIFY)

    def test_residual_suite_skips_normalized_checkpoints(self, chain_corpus):
        params = fresh_params(chain_corpus, normalization_mode="l2_temp")
        result = occupancy_residual_suite(params, chain_corpus, 0.9, 0.1)
        assert result.passed
        assert np.isnan(result.statistic)
        assert result.detail.startswith("skipped")


# =============================================================================
# Acceptance
# =============================================================================


@pytest.mark.slow
class TestOccupancyResidual:

    def test_long_horizon_grid(self):
        corpus = generate_corpus(CorpusConfig(family="grid", num_tasks=4, size=24, min_length=21,
                                              gamma=0.9, seed=0))
        assert max(t.length for t in corpus.trajectories) <= 30
        config = TrainConfig(gamma=0.9, steps=5000, learning_rate=1e-2, seed=0, log_every=0)
        result = train(corpus, config)

        residual = occupancy_residual_suite(result.params, corpus, 0.9, 0.1)
        assert residual.passed, residual.detail

        oracle = occupancy_oracle(corpus.mdp, expert_policy(corpus.mdp), 0.9)
        samples = corpus_samples(corpus)
        for goal in corpus.goals:
            log_q = [np.log(oracle.q(s.state, s.action, s.goal_id)) for s in samples
                     if s.goal_id == goal.goal_id]
            assert np.ptp(log_q) >= 20 * abs(np.log(0.9)) - 1e-9
