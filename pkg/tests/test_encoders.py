"""Tests for the encoders, optimizers and training loop.

Sections:
1. Parameters and encoding - shapes, flat vectors, normalization
2. Training loop - lambda=0, determinism, minibatches, BC head
3. Failure modes - single task corpora, numerical aborts, bad configs
"""

import numpy as np
import pytest

from crl.encoders import (
    EncoderParams,
    TrainConfig,
    corpus_samples,
    draw_batch,
    encode_goal,
    encode_sa,
    feature_matrix,
    init_params,
    scheduled_lr,
    train,
)
from crl.errors import NumericalAbort, ValidationError
from crl.testbed import Corpus

# =============================================================================
# Parameters and encoding
# =============================================================================


class TestEncoderParams:

    def test_shapes(self):
        config = TrainConfig(hidden_width=8, embed_dim=5)
        params = init_params(10, [3, 7], config)
        assert params.sa_w1.shape == (10, 8)
        assert params.sa_w2.shape == (8, 5)
        assert params.goal_table.shape == (2, 5)
        assert params.embed_dim == 5 and params.feature_dim == 10
        assert params.temperature == 1.0

    def test_flatten_round_trip(self):
        params = init_params(6, [0, 1], TrainConfig(hidden_width=4, embed_dim=3,
                                                    normalization_mode="l2_temp"))
        restored = params.unflatten(params.flatten())
        np.testing.assert_array_equal(restored.flatten(), params.flatten())
        assert restored.log_temperature == pytest.approx(np.log(1 / 0.07))
        with pytest.raises(ValidationError):
            params.unflatten(params.flatten()[:-1])

    def test_l2_embeddings_have_unit_norm(self, chain_corpus):
        config = TrainConfig(normalization_mode="l2_temp", hidden_width=8, embed_dim=4)
        samples = corpus_samples(chain_corpus)
        params = init_params(len(samples[0].sa_features), [0, 1], config)
        phi = encode_sa(params, feature_matrix(samples))
        np.testing.assert_allclose(np.linalg.norm(phi, axis=1), 1.0)
        assert np.linalg.norm(encode_goal(params, 1)) == pytest.approx(1.0)

    def test_goal_embedding_is_a_copy(self):
        params = init_params(4, [0, 1], TrainConfig(hidden_width=3, embed_dim=2))
        encode_goal(params, 0)[:] = 99.0
        assert not np.any(params.goal_table == 99.0)

    def test_unknown_goal_and_bad_features(self):
        params = init_params(4, [0, 1], TrainConfig(hidden_width=3, embed_dim=2))
        with pytest.raises(ValidationError):
            encode_goal(params, 5)
        with pytest.raises(ValidationError):
            encode_sa(params, np.zeros(3))
        with pytest.raises(ValidationError):
            encode_sa(params, np.full(4, np.nan))

    def test_mismatched_embedding_dims_are_rejected(self):
        with pytest.raises(ValidationError):
            EncoderParams(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 2)), np.zeros(2),
                          np.zeros((2, 5)), (0, 1))

    def test_corpus_samples_count_every_step(self, chain_corpus):
        samples = corpus_samples(chain_corpus)
        assert len(samples) == sum(t.length for t in chain_corpus.trajectories)
        assert [s.sample_index for s in samples] == list(range(len(samples)))
        assert all(1 <= s.t <= s.T for s in samples)


# =============================================================================
# Training loop
# =============================================================================


class TestTraining:

    def test_zero_lambda_leaves_encoders_untouched(self, chain_corpus):
        result = train(chain_corpus, TrainConfig(gamma=0.9, lambda_crl=0.0, steps=20, log_every=0))
        np.testing.assert_array_equal(result.params.flatten(), result.initial_params.flatten())
        assert all(r.total == 0.0 for r in result.history)

    @pytest.mark.parametrize("batch_size", [0, 6])
    def test_same_seed_same_history_and_parameters(self, chain_corpus, batch_size):
        config = TrainConfig(gamma=0.9, steps=25, hidden_width=16, embed_dim=4, batch_size=batch_size,
                             log_every=0)
        first = train(chain_corpus, config)
        second = train(chain_corpus, config)
        assert [r.to_dict() for r in first.history] == [r.to_dict() for r in second.history]
        np.testing.assert_array_equal(first.params.flatten(), second.params.flatten())

    def test_small_step_gradient_descent_never_increases_loss(self, chain_corpus):
        config = TrainConfig(gamma=0.9, steps=150, optimizer="sgd", lr_schedule="constant",
                             learning_rate=1e-2, log_every=0)
        totals = [r.total for r in train(chain_corpus, config).history]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(totals, totals[1:]))
        assert totals[-1] < totals[0]

    def test_loss_decreases(self, trained_chain):
        _, _, result = trained_chain
        assert result.history[-1].total < 0.5 * result.history[0].total

    def test_history_and_callback(self, chain_corpus):
        seen = []
        result = train(chain_corpus, TrainConfig(gamma=0.9, steps=7, log_every=0), on_step=seen.append)
        assert [r.step for r in result.history] == list(range(7))
        assert seen == result.history

    def test_minibatch_training(self, chain_corpus):
        config = TrainConfig(gamma=0.9, steps=10, batch_size=6, optimizer="sgd",
                             lr_schedule="constant", log_every=0)
        result = train(chain_corpus, config)
        assert len(result.history) == 10
        assert all(np.isfinite(r.total) for r in result.history)

    def test_l2_mode_learns_temperature(self, chain_corpus):
        config = TrainConfig(gamma=0.9, steps=30, normalization_mode="l2_temp", log_every=0)
        result = train(chain_corpus, config)
        assert result.history[0].temperature == pytest.approx(1 / 0.07)
        assert result.params.temperature != pytest.approx(1 / 0.07)

    def test_bc_head_learns_expert_actions(self, chain_corpus):
        config = TrainConfig(gamma=0.9, steps=300, bc_weight=1.0, log_every=0)
        result = train(chain_corpus, config)
        assert result.bc_head is not None
        assert result.history[-1].bc < result.history[0].bc
        samples = corpus_samples(chain_corpus)
        predicted = result.bc_head.logits(samples).argmax(axis=1)
        assert np.array_equal(predicted, [s.action for s in samples])

    def test_draw_batch_always_holds_two_tasks(self, chain_corpus):
        samples = corpus_samples(chain_corpus)
        for seed in range(30):
            batch = draw_batch(samples, 2, np.random.default_rng(seed), need_two_tasks=True)
            assert len({s.task_id for s in batch}) == 2
            assert [s.sample_index for s in batch] == [0, 1]

    def test_cosine_schedule(self):
        config = TrainConfig(learning_rate=0.1, steps=100)
        assert scheduled_lr(config, 0) == pytest.approx(0.1)
        assert scheduled_lr(config, 50) == pytest.approx(0.05)
        assert scheduled_lr(TrainConfig(learning_rate=0.1, lr_schedule="constant"), 70) == 0.1


# =============================================================================
# Failure modes
# =============================================================================


class TestTrainingFailures:

    def test_single_task_corpus_is_rejected(self, chain_corpus):
        single = Corpus(chain_corpus.config, chain_corpus.mdp, chain_corpus.goals,
                        chain_corpus.trajectories_for(0))
        with pytest.raises(ValidationError, match="at least 2 tasks"):
            train(single, TrainConfig(gamma=0.9, steps=1))

    def test_huge_learning_rate_aborts(self, chain_corpus):
        with pytest.raises(NumericalAbort) as exc_info:
            train(chain_corpus, TrainConfig(gamma=0.9, learning_rate=1e300, steps=3, log_every=0))
        assert exc_info.value.step is not None
        assert "sa_w2" in exc_info.value.param_norms

    @pytest.mark.parametrize("overrides", [
        {"batch_size": 1},
        {"gamma": 1.0},
        {"optimizer": "lbfgs"},
        {"embed_dim": 1},
        {"lambda_crl": -0.5},
    ])
    def test_bad_config_is_rejected(self, chain_corpus, overrides):
        with pytest.raises(ValidationError):
            train(chain_corpus, TrainConfig(**overrides))
