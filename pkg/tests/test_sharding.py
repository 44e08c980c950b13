"""Tests for the in-process sharded similarity computation.

Sections:
1. Shard plans - partitions, validation
2. Sharded gradients - agreement with the monolithic gradient, negative pool size
"""

import numpy as np
import pytest

from crl.encoders import TrainConfig, corpus_samples, crl_objective, draw_batch, feature_matrix, init_params
from crl.errors import ShardPlanError
from crl.sharding import ShardPlan, shard_report, sharded_crl_grad

# =============================================================================
# Shard plans
# =============================================================================


class TestShardPlan:

    def test_contiguous_plan_is_a_partition(self):
        plan = ShardPlan.contiguous(10, 3)
        plan.validate(10)
        assert sorted(np.concatenate([plan.rows(s) for s in range(3)]).tolist()) == list(range(10))
        assert plan.assignment == tuple(sorted(plan.assignment))

    def test_random_plan_balances_shards(self, rng):
        plan = ShardPlan.random(32, 8, rng)
        plan.validate(32)
        assert all(len(plan.rows(s)) == 4 for s in range(8))

    def test_empty_shard_is_rejected(self):
        with pytest.raises(ShardPlanError, match="shard 1"):
            ShardPlan(3, (0, 0, 2, 2)).validate(4)

    def test_wrong_size_is_rejected(self):
        with pytest.raises(ShardPlanError):
            ShardPlan(2, (0, 1, 0)).validate(4)

    def test_unknown_shard_is_rejected(self):
        with pytest.raises(ShardPlanError):
            ShardPlan(2, (0, 1, 2)).validate(3)


# =============================================================================
# Sharded gradients
# =============================================================================


def shard_setup(corpus, mode, size=32, seed=0):
    config = TrainConfig(gamma=0.9, hidden_width=16, embed_dim=8, init_scale=0.3,
                         normalization_mode=mode)
    rng = np.random.default_rng(seed)
    batch = draw_batch(corpus_samples(corpus), size, rng, need_two_tasks=True)
    params = init_params(len(batch[0].sa_features), [g.goal_id for g in corpus.goals], config, rng)
    return batch, params, config, rng


class TestShardedGradient:

    @pytest.mark.parametrize("mode", ["raw", "l2_temp"])
    @pytest.mark.parametrize("num_shards", [1, 2, 4, 8])
    def test_matches_monolithic(self, grid_corpus, mode, num_shards):
        batch, params, config, rng = shard_setup(grid_corpus, mode)
        report = shard_report(batch, params, ShardPlan.random(len(batch), num_shards, rng), config)
        assert report.max_grad_diff <= 1e-10
        assert report.loss_diff <= 1e-12

    def test_negative_pool_is_every_goal_in_batch(self, grid_corpus):
        batch, params, config, rng = shard_setup(grid_corpus, "raw")
        num_goals = len({s.goal_id for s in batch})
        for num_shards in (1, 4):
            result = sharded_crl_grad(batch, params, ShardPlan.random(len(batch), num_shards, rng), config)
            assert result.negatives_per_anchor == num_goals

    def test_components_add_up(self, chain_corpus):
        batch, params, config, rng = shard_setup(chain_corpus, "raw", size=16)
        mono, _ = crl_objective(params, batch, feature_matrix(batch), config)
        sharded = sharded_crl_grad(batch, params, ShardPlan.contiguous(16, 4), config)
        assert sharded.sa_to_l == pytest.approx(mono.sa_to_l, abs=1e-12)
        assert sharded.l_to_sa == pytest.approx(mono.l_to_sa, abs=1e-12)

    def test_local_only_gradient_differs(self, grid_corpus):
        batch, params, config, rng = shard_setup(grid_corpus, "raw")
        plan = ShardPlan.random(len(batch), 4, rng)
        report = shard_report(batch, params, plan, config, remote_grad=False)
        assert report.max_grad_diff > 1e-6
        assert report.loss_diff <= 1e-12

    def test_single_shard_local_only_is_exact(self, grid_corpus):
        batch, params, config, rng = shard_setup(grid_corpus, "raw")
        report = shard_report(batch, params, ShardPlan.contiguous(len(batch), 1), config, remote_grad=False)
        assert report.max_grad_diff <= 1e-10

    def test_thread_count_does_not_change_result(self, grid_corpus):
        batch, params, config, rng = shard_setup(grid_corpus, "l2_temp")
        plan = ShardPlan.random(len(batch), 8, rng)
        serial = sharded_crl_grad(batch, params, plan, config, max_workers=1)
        parallel = sharded_crl_grad(batch, params, plan, config, max_workers=8)
        np.testing.assert_array_equal(serial.grad, parallel.grad)
        assert serial.value == parallel.value
