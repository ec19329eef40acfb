import numpy as np
import pytest

from cavlab.errors import DimensionMismatch, InvalidIndexError, UnknownLayerError
from cavlab.nn.checkpoint import load_checkpoint, save_checkpoint
from cavlab.nn.model import (
    LOGITS,
    ActivationTensor,
    TrainedModel,
    build_network,
    continue_forward,
    eligible_layers,
    evaluate,
    forward_capture,
    grad_logit_wrt_activation,
    layer_index,
    logit_gradients,
    logits,
)
from cavlab.nn.train import fit_steps, train
from cavlab.schemas import ModelConfig, OptimizerConfig
from cavlab.storage import decode_bundle, encode_bundle


def _finite_difference(model, a, layer, k, coords, eps=1e-5):
    flat = a.reshape(-1)
    plus = np.repeat(flat[None], len(coords), axis=0)
    minus = plus.copy()
    plus[np.arange(len(coords)), coords] += eps
    minus[np.arange(len(coords)), coords] -= eps
    z_plus = continue_forward(model, plus, layer, LOGITS)[:, k]
    z_minus = continue_forward(model, minus, layer, LOGITS)[:, k]
    return (z_plus - z_minus) / (2 * eps)


class TestLayers:
    def test_layer_ids(self):
        assert layer_index("layers.0") == 0
        assert layer_index(LOGITS) == 6
        with pytest.raises(UnknownLayerError):
            layer_index("conv3")

    def test_shapes_follow_pooling(self, tiny_model):
        assert tiny_model.layer_shape("layers.0") == (8, 8, 4)
        assert tiny_model.layer_shape("layers.2") == (2, 2, 4)
        assert tiny_model.layer_shape("layers.5") == (2, 2, 4)
        assert tiny_model.layer_size("layers.1") == 64

    def test_capture_shapes(self, tiny_model, tiny_images):
        batch = forward_capture(tiny_model, tiny_images, "layers.1")
        single = forward_capture(tiny_model, tiny_images[0], "layers.1")
        assert batch.data.shape == (5, 4, 4, 4)
        assert single.data.shape == (4, 4, 4)
        np.testing.assert_allclose(single.data, batch.data[0], atol=1e-12)

    def test_flatten_roundtrip(self, tiny_model, tiny_images):
        acts = forward_capture(tiny_model, tiny_images, "layers.1")
        again = ActivationTensor.from_flat("layers.1", acts.flatten(), tiny_model.layer_shape("layers.1"))
        np.testing.assert_array_equal(again.data, acts.data)
        with pytest.raises(DimensionMismatch):
            ActivationTensor.from_flat("layers.1", np.zeros(7), (4, 4, 4))


class TestComposition:
    def test_continue_forward_composes(self, tiny_model, tiny_images):
        a1 = forward_capture(tiny_model, tiny_images, "layers.1")
        a3 = forward_capture(tiny_model, tiny_images, "layers.3")
        np.testing.assert_allclose(continue_forward(tiny_model, a1, "layers.1", "layers.3").data, a3.data, atol=1e-10)

    def test_continue_to_logits(self, tiny_model, tiny_images):
        a2 = forward_capture(tiny_model, tiny_images, "layers.2")
        np.testing.assert_allclose(
            continue_forward(tiny_model, a2, "layers.2", LOGITS), logits(tiny_model, tiny_images), atol=1e-10
        )

    def test_layer_order_enforced(self, tiny_model, tiny_images):
        a2 = forward_capture(tiny_model, tiny_images, "layers.2")
        with pytest.raises(UnknownLayerError):
            continue_forward(tiny_model, a2, "layers.2", "layers.1")

    def test_wrong_activation_shape(self, tiny_model):
        with pytest.raises(DimensionMismatch):
            continue_forward(tiny_model, np.zeros((2, 5, 5, 4)), "layers.1", "layers.2")


class TestGradients:
    @pytest.mark.parametrize("layer", ["layers.1", "layers.3"])
    def test_matches_central_differences(self, tiny_model, tiny_images, layer):
        k = 2
        grad = grad_logit_wrt_activation(tiny_model, tiny_images[0], layer, k)
        a = forward_capture(tiny_model, tiny_images[0], layer).data
        coords = np.random.default_rng(5).choice(grad.size, size=min(40, grad.size), replace=False)
        fd = _finite_difference(tiny_model, a, layer, k, coords)
        rel = np.linalg.norm(fd - grad[coords]) / max(np.linalg.norm(grad[coords]), 1e-12)
        assert rel < 1e-3

    def test_batched_matches_single(self, tiny_model, tiny_images):
        batch = logit_gradients(tiny_model, tiny_images, "layers.2", 1)
        single = grad_logit_wrt_activation(tiny_model, tiny_images[3], "layers.2", 1)
        assert batch.shape == (5, tiny_model.layer_size("layers.2"))
        np.testing.assert_allclose(batch[3], single, atol=1e-12)

    def test_class_index_checked(self, tiny_model, tiny_images):
        with pytest.raises(InvalidIndexError):
            logit_gradients(tiny_model, tiny_images, "layers.2", tiny_model.num_classes)

    def test_linear_tail_has_constant_gradient(self, tiny_images):
        config = ModelConfig(channels_per_layer=[4] * 6, input_side=16, activation="linear")
        model = TrainedModel(config, build_network(config, 3))
        grads = logit_gradients(model, tiny_images, "layers.4", 0)
        np.testing.assert_allclose(grads, np.repeat(grads[:1], len(grads), axis=0), atol=1e-10)


class TestEligibility:
    def test_linear_tail_layers_dropped(self):
        config = ModelConfig(channels_per_layer=[4] * 6, input_side=16, activation="linear")
        assert eligible_layers(config) == ["layers.0", "layers.1"]

    def test_hidden_head_keeps_every_layer(self):
        config = ModelConfig(channels_per_layer=[4] * 6, input_side=16, activation="linear", head_hidden=8)
        assert len(eligible_layers(config)) == 6

    def test_low_accuracy_excluded(self, tiny_model_config):
        layers = eligible_layers(tiny_model_config, {"layers.1": 0.6, "layers.2": 0.95}, 0.9)
        assert "layers.1" not in layers and "layers.2" in layers


class TestTraining:
    def test_evaluate_matches_definition(self, tiny_model, tiny_images):
        labels = (np.arange(5 * tiny_model.num_classes).reshape(5, -1) % 2).astype(np.float32)
        loss, accuracy = evaluate(tiny_model, tiny_images, labels)
        z = logits(tiny_model, tiny_images)
        p = 1 / (1 + np.exp(-z))
        expected = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p))
        assert loss == pytest.approx(expected, rel=1e-6)
        assert 0.0 <= accuracy <= 1.0

    def test_fixed_batch_loss_decreases(self, tiny_model, tiny_images):
        labels = np.zeros((5, tiny_model.num_classes), dtype=np.float32)
        labels[:, 0] = 1.0
        losses = fit_steps(tiny_model, tiny_images, labels, 10, OptimizerConfig(learning_rate=1e-2))
        assert losses[-1] < losses[0]

    def test_zero_epochs_returns_initialized_model(self, tiny_model_config, tiny_images):
        labels = np.zeros((5, 3), dtype=np.float32)
        model = train(tiny_model_config, tiny_images, labels, OptimizerConfig(max_epochs=0))
        assert not model.log.converged
        assert "max_epochs is 0" in model.log.warning
        assert model.num_classes == 3

    def test_training_log_records_epochs(self, tiny_model_config, tiny_images):
        labels = np.zeros((5, 3), dtype=np.float32)
        model = train(tiny_model_config, tiny_images, labels, OptimizerConfig(max_epochs=2, batch_size=2),
                      validation=(tiny_images, labels))
        assert 1 <= len(model.log.epochs) <= 2
        assert model.log.epochs[0].val_loss is not None

    def test_label_width_checked(self, tiny_images):
        config = ModelConfig(channels_per_layer=[4] * 6, input_side=16, num_classes=4)
        with pytest.raises(DimensionMismatch):
            train(config, tiny_images, np.zeros((5, 3), dtype=np.float32), OptimizerConfig(max_epochs=0))


class TestCheckpoint:
    def test_roundtrip_preserves_logits(self, tiny_model, tiny_images):
        restored = load_checkpoint(save_checkpoint(tiny_model))
        np.testing.assert_allclose(logits(restored, tiny_images), logits(tiny_model, tiny_images), atol=1e-6)
        assert restored.config == tiny_model.config

    def test_shape_mismatch_rejected(self, tiny_model):
        arrays, meta = decode_bundle(save_checkpoint(tiny_model))
        meta["model_config"]["channels_per_layer"] = [8] * 6
        with pytest.raises(DimensionMismatch, match="Checkpoint mismatch"):
            load_checkpoint(encode_bundle(arrays, meta))
