import math

import numpy as np
import pytest

from crossface.dpm import (
    DpmModel,
    TrainConfig,
    forward,
    glorot_init,
    gradient,
    loss,
    map_descriptor_set,
    train,
)
from crossface.errors import InvalidInputError, InvalidParameterError
from crossface.features import DescriptorSet


def finite_difference_gradients(model, x, t, lam, step=1e-5, include_output_penalty=False):
    """Central differences of the loss over every parameter."""
    g_w = [np.zeros_like(w) for w in model.weights]
    g_b = [np.zeros_like(b) for b in model.biases]
    for w, g in zip(model.weights, g_w):
        flat_w, flat_g = w.ravel(), g.ravel()
        for i in range(flat_w.size):
            orig = flat_w[i]
            flat_w[i] = orig + step
            j_plus = loss(model, x, t, lam, include_output_penalty=include_output_penalty)
            flat_w[i] = orig - step
            j_minus = loss(model, x, t, lam, include_output_penalty=include_output_penalty)
            flat_w[i] = orig
            flat_g[i] = (j_plus - j_minus) / (2 * step)
    for b, g in zip(model.biases, g_b):
        for i in range(b.size):
            orig = b[i]
            b[i] = orig + step
            j_plus = loss(model, x, t, lam, include_output_penalty=include_output_penalty)
            b[i] = orig - step
            j_minus = loss(model, x, t, lam, include_output_penalty=include_output_penalty)
            b[i] = orig
            g[i] = (j_plus - j_minus) / (2 * step)
    return g_w, g_b


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


class TestGlorotInit:
    def test_bound_for_66_to_200(self):
        bound = math.sqrt(6) / math.sqrt(66 + 200)
        assert abs(bound - 0.15019) < 1e-4
        model = glorot_init([66, 200, 66], seed=42)
        assert np.all(np.abs(model.weights[0]) <= bound)

    def test_biases_start_at_zero(self):
        model = glorot_init([10, 20, 30, 10], seed=0)
        for b in model.biases:
            np.testing.assert_array_equal(b, np.zeros_like(b))

    def test_same_seed_bit_identical(self):
        a = glorot_init([8, 16, 8], seed=123)
        b = glorot_init([8, 16, 8], seed=123)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_different_seeds_differ(self):
        a = glorot_init([8, 16, 8], seed=1)
        b = glorot_init([8, 16, 8], seed=2)
        assert not np.array_equal(a.weights[0], b.weights[0])


class TestForward:
    def test_zero_model_maps_to_zero(self):
        model = glorot_init([5, 7, 5], seed=0)
        for w in model.weights:
            w[:] = 0.0
        out, _ = forward(model, np.ones(5))
        np.testing.assert_array_equal(out, np.zeros(5))

    def test_constant_bias_propagates_through_tanh(self):
        model = glorot_init([3, 4, 3], seed=0)
        model.weights[0][:] = 0.0
        model.biases[0][:] = 0.7
        model.weights[1][:] = 0.0
        model.weights[1][0, 0] = 1.0
        out, _ = forward(model, np.array([9.0, -3.0, 0.5]))
        assert abs(out[0] - math.tanh(0.7)) < 1e-15
        assert out[1] == 0.0 and out[2] == 0.0

    def test_hidden_activations_strictly_inside_unit_interval(self):
        model = glorot_init([6, 12, 12, 6], seed=3)
        x = np.random.default_rng(4).standard_normal((20, 6)) * 5
        _, states = forward(model, x)
        for h in states[1:]:
            assert np.all(h > -1.0) and np.all(h < 1.0)

    def test_dimension_mismatch_rejected(self):
        model = glorot_init([5, 7, 5], seed=0)
        with pytest.raises(InvalidInputError):
            forward(model, np.ones(6))

    def test_batch_matches_single(self):
        model = glorot_init([4, 9, 4], seed=5)
        x = np.random.default_rng(6).standard_normal((7, 4))
        batch_out, _ = forward(model, x)
        for i in range(7):
            single_out, _ = forward(model, x[i])
            np.testing.assert_allclose(batch_out[i], single_out, atol=1e-15)


class TestLoss:
    def test_perfect_fit_zero_loss(self):
        model = glorot_init([4, 6, 4], seed=7)
        x = np.random.default_rng(8).standard_normal((5, 4))
        out, _ = forward(model, x)
        assert loss(model, x, out, 0.0) == 0.0

    def test_unit_residual(self):
        model = glorot_init([4, 6, 4], seed=9)
        for w in model.weights:
            w[:] = 0.0
        t = np.zeros((1, 4))
        t[0, 0] = -1.0  # out - t = (1, 0, 0, 0)
        assert abs(loss(model, np.ones((1, 4)), t, 0.0) - 1.0) < 1e-15

    def test_empty_batch_rejected(self):
        model = glorot_init([4, 6, 4], seed=0)
        with pytest.raises(InvalidInputError):
            loss(model, np.zeros((0, 4)), np.zeros((0, 4)), 0.0)

    def test_regularizer_excludes_output_layer_by_default(self):
        model = glorot_init([3, 5, 3], seed=10)
        x = np.random.default_rng(0).standard_normal((4, 3))
        out, _ = forward(model, x)
        j = loss(model, x, out, 1.0)
        expected = (np.sum(model.weights[0] ** 2) + np.sum(model.biases[0] ** 2)) / 1
        assert abs(j - expected) < 1e-12
        j_full = loss(model, x, out, 1.0, include_output_penalty=True)
        assert abs(j_full - expected - np.sum(model.weights[1] ** 2)) < 1e-12


class TestGradient:
    def test_zero_residual_zero_gradient(self):
        model = glorot_init([4, 8, 4], seed=11)
        x = np.random.default_rng(12).standard_normal((5, 4))
        out, _ = forward(model, x)
        grads = gradient(model, x, out, 0.0)
        for g in grads.weights + grads.biases:
            np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_regularizer_only_gradient(self):
        model = glorot_init([4, 8, 4], seed=13)
        x = np.random.default_rng(14).standard_normal((5, 4))
        out, _ = forward(model, x)
        lam = 0.3
        grads = gradient(model, x, out, lam)
        n = model.n_hidden
        np.testing.assert_allclose(grads.weights[0], 2 * lam / n * model.weights[0], atol=1e-12)
        np.testing.assert_allclose(grads.weights[-1], 0.0, atol=1e-12)

    def test_matches_finite_differences_small_net(self):
        rng = np.random.default_rng(15)
        model = glorot_init([3, 4, 3], seed=16)
        x = rng.standard_normal((5, 3))
        t = rng.standard_normal((5, 3))
        grads = gradient(model, x, t, 0.01)
        fd_w, fd_b = finite_difference_gradients(model, x, t, 0.01)
        assert max_relative_error(grads.weights, fd_w) < 1e-6
        assert max_relative_error(grads.biases, fd_b) < 1e-6

    def test_matches_finite_differences_two_hidden(self):
        rng = np.random.default_rng(17)
        model = glorot_init([4, 6, 5, 4], seed=18)
        x = rng.standard_normal((5, 4))
        t = rng.standard_normal((5, 4))
        grads = gradient(model, x, t, 0.001, include_output_penalty=True)
        fd_w, fd_b = finite_difference_gradients(model, x, t, 0.001, include_output_penalty=True)
        assert max_relative_error(grads.weights, fd_w) < 1e-6
        assert max_relative_error(grads.biases, fd_b) < 1e-6

    def test_one_small_step_does_not_increase_loss(self):
        rng = np.random.default_rng(19)
        for seed in range(5):
            model = glorot_init([5, 9, 5], seed=seed)
            x = rng.standard_normal((16, 5))
            t = rng.standard_normal((16, 5))
            j0 = loss(model, x, t, 1e-3)
            grads = gradient(model, x, t, 1e-3)
            for w, g in zip(model.weights, grads.weights):
                w -= 1e-4 * g
            for b, g in zip(model.biases, grads.biases):
                b -= 1e-4 * g
            assert loss(model, x, t, 1e-3) <= j0


class TestTrain:
    def test_identity_mapping_is_learnable(self):
        rng = np.random.default_rng(20)
        x = rng.uniform(-1, 1, size=(4000, 10))
        config = TrainConfig(
            reg_lambda=0.0, learning_rate=0.05, batch_size=64, epochs=30, seed=21,
            holdout_fraction=0.0,
        )
        untrained = glorot_init([10, 30, 30, 10], seed=22)
        out0, _ = forward(untrained, x)
        base = np.sum((out0 - x) ** 2) / x.shape[0]
        model, log = train(x, x, config, [10, 30, 30, 10])
        out, _ = forward(model, x)
        final = np.sum((out - x) ** 2) / x.shape[0]
        assert final <= 0.01 * base
        assert len(log.epoch_loss) >= 1

    def test_teacher_student_reaches_noise_free_threshold(self):
        rng = np.random.default_rng(23)
        teacher = glorot_init([6, 8, 6], seed=24)
        teacher.weights[-1] *= 2.0  # give targets healthy scale
        x = rng.uniform(-1, 1, size=(6000, 6))
        t, _ = forward(teacher, x)
        config = TrainConfig(
            reg_lambda=0.0, learning_rate=0.1, batch_size=32, epochs=120, seed=25,
            holdout_fraction=0.0, halve_lr_on_plateau=False,
        )
        model, _ = train(x, t, config, [6, 8, 6])
        out, _ = forward(model, x)
        residual = np.sum((out - t) ** 2) / x.shape[0]
        assert residual < 1e-3

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(26)
        x = rng.standard_normal((300, 5))
        t = rng.standard_normal((300, 5))
        config = TrainConfig(batch_size=32, epochs=3, seed=27)
        a, _ = train(x, t, config, [5, 8, 5])
        b, _ = train(x, t, config, [5, 8, 5])
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_too_few_pairs_rejected(self):
        config = TrainConfig(batch_size=128, epochs=1, seed=0)
        with pytest.raises(InvalidParameterError):
            train(np.zeros((10, 5)), np.zeros((10, 5)), config, [5, 8, 5])

    def test_invalid_config_rejected(self):
        with pytest.raises(InvalidParameterError):
            TrainConfig(learning_rate=-1).validate()
        with pytest.raises(InvalidParameterError):
            TrainConfig(reg_lambda=-0.5).validate()

    def test_standardization_recorded_on_model(self):
        rng = np.random.default_rng(28)
        x = rng.standard_normal((500, 6)) * 40 + 3
        t = rng.standard_normal((500, 6))
        config = TrainConfig(batch_size=64, epochs=2, seed=29, standardize_dims=4)
        model, _ = train(x, t, config, [6, 8, 6])
        assert np.allclose(model.input_scale[4:], 1.0)
        assert np.allclose(model.input_mean[4:], 0.0)
        assert np.all(model.input_scale[:4] > 10)


class TestMapDescriptorSet:
    def _dset(self, modality="source"):
        rng = np.random.default_rng(30)
        return DescriptorSet(
            "img0",
            modality,
            40,
            40,
            rng.standard_normal((12, 6)),
            rng.standard_normal((12, 2)),
            np.zeros(12, dtype=np.int8),
        )

    def test_zero_model_gives_zero_values(self):
        model = glorot_init([6, 4, 6], seed=31)
        for w in model.weights:
            w[:] = 0.0
        mapped = map_descriptor_set(model, self._dset())
        np.testing.assert_array_equal(mapped.values, np.zeros((12, 6)))
        assert mapped.modality == "mapped-source"

    def test_structure_preserved(self):
        model = glorot_init([6, 4, 6], seed=32)
        dset = self._dset()
        mapped = map_descriptor_set(model, dset)
        assert mapped.n_descriptors == dset.n_descriptors
        np.testing.assert_array_equal(mapped.centers, dset.centers)
        np.testing.assert_array_equal(mapped.scale_index, dset.scale_index)

    def test_target_modality_rejected(self):
        model = glorot_init([6, 4, 6], seed=33)
        with pytest.raises(InvalidInputError):
            map_descriptor_set(model, self._dset(modality="target"))

    def test_identity_trained_model_roundtrips_values(self):
        rng = np.random.default_rng(34)
        x = rng.uniform(-1, 1, size=(4000, 6))
        config = TrainConfig(
            reg_lambda=0.0, learning_rate=0.05, batch_size=64, epochs=40, seed=35,
            holdout_fraction=0.0,
        )
        model, _ = train(x, x, config, [6, 20, 20, 6])
        dset = DescriptorSet(
            "img1", "source", 40, 40,
            rng.uniform(-1, 1, size=(10, 6)),
            rng.standard_normal((10, 2)),
            np.zeros(10, dtype=np.int8),
        )
        mapped = map_descriptor_set(model, dset)
        err = np.max(np.abs(mapped.values - dset.values))
        assert err < 0.2  # learned tolerance, not exact


class TestSerialization:
    def test_roundtrip_reproduces_forward_bit_exactly(self, tmp_path):
        rng = np.random.default_rng(36)
        x = rng.standard_normal((200, 5))
        t = rng.standard_normal((200, 5))
        config = TrainConfig(batch_size=32, epochs=2, seed=37, standardize_dims=3)
        model, _ = train(x, t, config, [5, 9, 5])
        path = tmp_path / "model.bin"
        model.save(path)
        loaded = DpmModel.load(path)
        assert loaded.layer_dims == model.layer_dims
        probe = rng.standard_normal((20, 5))
        a, _ = forward(model, model.standardize(probe))
        b, _ = forward(loaded, loaded.standardize(probe))
        np.testing.assert_array_equal(a, b)
        assert loaded.meta["train_config"]["seed"] == 37


class TestForwardBounds:
    def test_output_bounded_by_weight_row_norms(self):
        rng = np.random.default_rng(40)
        model = glorot_init([6, 15, 6], seed=41)
        model.weights[-1] *= 5.0
        x = rng.standard_normal((50, 6)) * 10
        out, states = forward(model, x)
        m_last = states[-1].shape[1]
        row_norms = np.linalg.norm(model.weights[-1], axis=1)
        bound = row_norms * np.sqrt(m_last)  # hidden activations live in (-1, 1)
        assert np.all(np.abs(out) <= bound + 1e-12)
