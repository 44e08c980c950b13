"""Tests for the flow-matching action head and its Euler sampler.

Sections:
1. Interpolation - endpoints, per-row tau, input checks
2. Flow-matching loss - trivial values, gradients, least-squares optimum
3. Sampler - constant, point-mass and Gaussian fields against closed forms
4. Training - corpus datasets, conditional recovery
"""

import numpy as np
import pytest

from crl.encoders import TrainConfig, init_params
from crl.errors import ValidationError
from crl.flow_expert import (
    ActionChunk,
    FlowConfig,
    FlowDataset,
    FlowHead,
    constant_field,
    corpus_flow_dataset,
    euler_gain,
    fm_loss,
    gaussian_field,
    initial_noise,
    interpolate,
    point_mass_field,
    sample,
    train_flow,
)
from crl.gradcheck import gradient_check

# =============================================================================
# Interpolation
# =============================================================================


class TestInterpolate:

    def test_endpoints_and_midpoint(self, rng):
        clean = rng.normal(size=(3, 2))
        eps = rng.normal(size=(3, 2))
        np.testing.assert_array_equal(interpolate(clean, eps, 1.0).noised, clean)
        np.testing.assert_array_equal(interpolate(clean, eps, 0.0).noised, eps)
        assert interpolate(np.array([[2.0]]), np.array([[0.0]]), 0.5).noised[0, 0] == 1.0

    def test_one_tau_per_row(self, rng):
        clean = rng.normal(size=(4, 3, 2))
        eps = rng.normal(size=(4, 3, 2))
        tau = np.array([0.0, 0.25, 0.5, 1.0])
        noised = interpolate(clean, eps, tau).noised
        for row, t in enumerate(tau):
            np.testing.assert_allclose(noised[row], t * clean[row] + (1 - t) * eps[row])

    def test_tau_outside_unit_interval(self):
        with pytest.raises(ValidationError):
            interpolate(np.zeros((1, 1)), np.zeros((1, 1)), 1.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            interpolate(np.zeros((2, 2)), np.zeros((2, 3)), 0.5)

    def test_chunks_must_be_finite(self):
        with pytest.raises(ValidationError):
            ActionChunk(np.array([[np.nan]]))


# =============================================================================
# Flow-matching loss
# =============================================================================


class TestFmLoss:

    def test_zero_model_costs_mean_square_target(self, rng):
        model = FlowHead(2, 3, 0, kind="linear")
        clean = rng.normal(size=(2, 3))
        eps = rng.normal(size=(2, 3))
        loss, _ = fm_loss(model, clean, eps, 0.3)
        assert loss == pytest.approx(np.mean((clean - eps) ** 2))

    def test_gradient_matches_finite_differences(self, rng):
        model = FlowHead(2, 2, 3, kind="mlp", hidden_width=6, rng=rng)
        clean = rng.normal(size=(5, 2, 2))
        eps = rng.normal(size=(5, 2, 2))
        tau = rng.random(5)
        cond = rng.normal(size=(5, 3))
        start = model.flatten()
        _, analytic = fm_loss(model, clean, eps, tau, cond)

        def value(flat):
            return fm_loss(model.load_flat(flat.copy()), clean, eps, tau, cond)[0]

        assert gradient_check(value, analytic, start).max_rel_error < 1e-6

    def test_linear_head_least_squares_optimum(self, rng):
        model = FlowHead(2, 2, 3, kind="linear")
        n = 64
        clean = rng.normal(size=(n, 2, 2))
        eps = rng.normal(size=(n, 2, 2))
        tau = rng.random(n)
        cond = rng.normal(size=(n, 3))
        inputs, _ = model._inputs(interpolate(clean, eps, tau).noised, tau, cond)
        design = np.hstack([inputs, np.ones((n, 1))])
        solution, *_ = np.linalg.lstsq(design, (clean - eps).reshape(n, -1), rcond=None)
        model.load_flat(np.concatenate([solution[:-1].ravel(), solution[-1]]))
        loss, grad = fm_loss(model, clean, eps, tau, cond)
        assert np.abs(grad).max() < 1e-10
        residual = design @ solution - (clean - eps).reshape(n, -1)
        assert loss == pytest.approx(np.mean(residual ** 2), rel=1e-10)

    def test_flat_round_trip(self, rng):
        model = FlowHead(3, 2, 4, hidden_width=5, rng=rng)
        other = FlowHead(**model.config()).load_flat(model.flatten())
        x = rng.normal(size=(3, 2))
        np.testing.assert_array_equal(other(x, 0.4, np.ones(4)), model(x, 0.4, np.ones(4)))
        with pytest.raises(ValidationError):
            FlowHead(**model.config()).load_flat(model.flatten()[:-2])

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            FlowHead(2, 2, 0, kind="transformer")


# =============================================================================
# Sampler
# =============================================================================


class TestSampler:

    @pytest.mark.parametrize("steps", [1, 3, 7])
    def test_constant_field_is_exact(self, steps):
        v = np.array([[0.5, -1.0], [2.0, 0.0]])
        chunk = sample(constant_field(v), steps=steps, seed=4, shape=(2, 2))
        np.testing.assert_allclose(chunk.values, initial_noise((2, 2), 4) + v, atol=1e-12)

    @pytest.mark.parametrize("steps", [1, 5, 20])
    def test_point_mass_field_lands_on_target(self, steps):
        target = np.array([[1.0, -2.0, 0.5]])
        chunk = sample(point_mass_field(target), steps=steps, seed=9, shape=(1, 3))
        np.testing.assert_allclose(chunk.values, target, atol=1e-12)

    def test_gaussian_field_follows_euler_gain(self):
        mean = np.array([[1.0, 2.0], [-1.0, 0.0]])
        chunk = sample(gaussian_field(mean, 0.5), steps=5, seed=2, shape=(2, 2))
        expected = mean + euler_gain(0.5, 5) * initial_noise((2, 2), 2)
        np.testing.assert_allclose(chunk.values, expected, atol=1e-12)

    def test_gaussian_euler_error_shrinks_with_steps(self):
        errors = [abs(euler_gain(0.5, n) - 0.5) for n in (1, 2, 5, 10, 50)]
        assert errors[0] == pytest.approx(0.5)
        assert errors[1] == pytest.approx(0.3)
        assert all(later < earlier for earlier, later in zip(errors, errors[1:]))

    def test_same_seed_same_chunk(self, rng):
        model = FlowHead(3, 2, 2, rng=rng)
        first = sample(model, np.ones(2), steps=5, seed=11)
        second = sample(model, np.ones(2), steps=5, seed=11)
        np.testing.assert_array_equal(first.values, second.values)
        assert first.horizon == 3

    def test_zero_steps_rejected(self):
        with pytest.raises(ValidationError):
            sample(constant_field(np.zeros((1, 1))), steps=0, shape=(1, 1))


# =============================================================================
# Training
# =============================================================================


class TestFlowTraining:

    def test_corpus_dataset_chunks(self, chain_corpus):
        params = init_params(chain_corpus.mdp.num_states + chain_corpus.mdp.num_actions, [0, 1],
                             TrainConfig(embed_dim=4, hidden_width=4))
        dataset = corpus_flow_dataset(chain_corpus, params, horizon=3)
        total = sum(t.length for t in chain_corpus.trajectories)
        assert dataset.chunks.shape == (total, 3, 2)
        assert dataset.conditions.shape == (total, chain_corpus.mdp.num_states + 4)
        last = chain_corpus.trajectories[0]
        row = last.length - 1
        assert dataset.chunks[row, 0, last.actions[-1]] == 1.0
        assert np.all(dataset.chunks[row, 1:] == 0.0)

    def test_short_training_run(self, rng):
        dataset = FlowDataset(rng.normal(size=(16, 2, 2)), rng.normal(size=(16, 3)))
        config = FlowConfig(flow_kind="linear", flow_steps=40, flow_batch_size=32)
        model, history = train_flow(dataset, config)
        assert len(history) == 40
        assert model.cond_dim == 3 and model.chunk_shape == (2, 2)
        assert np.all(np.isfinite(history))

    def test_dataset_needs_matching_conditions(self):
        with pytest.raises(ValidationError):
            FlowDataset(np.zeros((3, 2, 2)), np.zeros((2, 1)))

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            train_flow(FlowDataset(np.zeros((1, 1, 1)), np.zeros((1, 1))), FlowConfig(flow_horizon=0))

    @pytest.mark.slow
    def test_conditional_recovery(self):
        targets = np.array([[[1.0, 0.0], [0.0, 1.0]], [[-1.0, 0.5], [0.5, -1.0]]])
        conditions = np.eye(2)
        dataset = FlowDataset(np.repeat(targets, 8, axis=0), np.repeat(conditions, 8, axis=0))
        config = FlowConfig(flow_hidden=128, flow_steps=4000, flow_batch_size=512, flow_seed=3)
        model, _ = train_flow(dataset, config)
        for c in range(2):
            draws = np.stack([sample(model, conditions[c], steps=5, seed=s).values for s in range(256)])
            assert np.abs(draws.mean(axis=0) - targets[c]).max() < 0.05
