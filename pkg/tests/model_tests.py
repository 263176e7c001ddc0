import numpy as np
import pytest
from pydantic import ValidationError

from src.autograd.gradcheck import finite_difference_check
from src.autograd.tensor import Tensor
from src.cli.gradcheck_suite import end_to_end_model, run_suite
from src.error_handling import CorruptContainerError, IncompatibleCheckpointError, ShapeMismatchError
from src.model.attention import FcssamConfig, fcssam_forward
from src.model.backbone import BackboneConfig, backbone_forward, load_feature_file, save_feature_file
from src.model.fanet import (
    FaNet,
    ModelConfig,
    extract_attention_diagnostics,
    extract_gap_features,
    forward,
    predict,
)
from src.storage.container import write_container
from src.train.trainer import cross_entropy_loss


@pytest.fixture
def rng():
    return np.random.default_rng(5)


@pytest.fixture
def small_config():
    return ModelConfig(
        backbone=BackboneConfig(widths=[4, 8], strides=[2, 2], input_height=16, input_width=16),
        fcssam=FcssamConfig(channels=8, reduction_ratio=4, retention=0.8),
        num_classes=3,
    )


@pytest.fixture
def images(rng):
    return Tensor(rng.uniform(0, 1, size=(2, 16, 16, 3)))


def test_backbone_config_validation():
    assert BackboneConfig(widths=[4, 8], strides=[2, 2], input_height=16, input_width=16).output_shape == (4, 4, 8)
    with pytest.raises(ValidationError):
        BackboneConfig(widths=[4], strides=[3])
    with pytest.raises(ValidationError):
        BackboneConfig(widths=[4, 8], strides=[2, 2], input_height=18, input_width=16)
    with pytest.raises(ValidationError):
        BackboneConfig(widths=[4, 8], strides=[2])


def test_model_config_checks_channels_and_classes():
    backbone = BackboneConfig(widths=[4, 8], strides=[2, 2], input_height=16, input_width=16)
    with pytest.raises(ValidationError):
        ModelConfig(backbone=backbone, fcssam=FcssamConfig(channels=16, reduction_ratio=4))
    with pytest.raises(ValidationError):
        ModelConfig(backbone=backbone, fcssam=FcssamConfig(channels=8, reduction_ratio=4), num_classes=1)


def test_forward_shapes(small_config, images):
    model = FaNet.build(small_config, seed=0)
    logits = forward(model, images)
    assert logits.shape == (2, 3)
    assert model.head.weight.shape == (13, 3)
    assert extract_gap_features(model, images).shape == (2, 13)


def test_predict_probabilities(small_config, images):
    prediction = predict(FaNet.build(small_config), images)
    np.testing.assert_allclose(prediction.probabilities.sum(axis=1), 1.0)
    np.testing.assert_array_equal(prediction.labels, prediction.probabilities.argmax(axis=1))


def test_build_is_deterministic(small_config, images):
    a = forward(FaNet.build(small_config, seed=3), images).data
    b = forward(FaNet.build(small_config, seed=3), images).data
    c = forward(FaNet.build(small_config, seed=4), images).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_parameter_registry_names(small_config):
    names = FaNet.build(small_config).parameters()
    for expected in ("backbone.stage0.kernel", "fcssam.cam.d1.weight", "fcssam.sam_avg.kernel",
                     "fcssam.fcs.alpha", "fcssam.fcs.mu", "head.weight", "head.bias"):
        assert expected in names


def test_wrong_input_shape(small_config):
    with pytest.raises(ShapeMismatchError):
        forward(FaNet.build(small_config), Tensor(np.zeros((1, 8, 8, 3))))


def test_state_dict_roundtrip_and_mismatch(small_config, images):
    source = FaNet.build(small_config, seed=1)
    target = FaNet.build(small_config, seed=2)
    target.load_state_dict(source.state_dict())
    np.testing.assert_array_equal(forward(source, images).data, forward(target, images).data)

    broken = source.state_dict()
    broken["head.weight"] = np.zeros((13, 2))
    del broken["head.bias"]
    with pytest.raises(IncompatibleCheckpointError) as exc:
        target.load_state_dict(broken)
    assert "head.bias" in str(exc.value) and "head.weight" in str(exc.value)


def test_attention_diagnostics(small_config, rng):
    model = FaNet.build(small_config)
    diag = extract_attention_diagnostics(model, Tensor(rng.uniform(0, 1, size=(16, 16, 3))))
    assert diag.cam_weights.shape == (8,)
    assert diag.sam_avg_map.shape == (4, 4) and diag.sam_max_map.shape == (4, 4)
    assert diag.sam_avg_map.min() >= 0.0 and diag.sam_avg_map.max() <= 1.0
    assert diag.gate_values.shape == (16,)
    assert len(diag.selected_indices) == 13
    assert list(diag.selected_indices) == sorted(diag.selected_indices)


def test_diagnostics_take_one_image(small_config, images):
    with pytest.raises(ShapeMismatchError):
        extract_attention_diagnostics(FaNet.build(small_config), images)


def test_feature_import_path(tmp_path, rng):
    config = ModelConfig(backbone=None, fcssam=FcssamConfig(channels=8, reduction_ratio=4), num_classes=2)
    features = rng.normal(size=(3, 5, 5, 8))
    path = tmp_path / "features.fant"
    save_feature_file(path, features)
    loaded = load_feature_file(path)
    np.testing.assert_array_equal(loaded.data, features)
    assert forward(FaNet.build(config), loaded).shape == (3, 2)


def test_feature_file_errors(tmp_path):
    write_container(tmp_path / "other.fant", {"weights": np.zeros(3)})
    with pytest.raises(CorruptContainerError):
        load_feature_file(tmp_path / "other.fant")
    with pytest.raises(ShapeMismatchError):
        save_feature_file(tmp_path / "bad.fant", np.zeros((2, 3)))


def test_end_to_end_gradients_match_finite_differences():
    model, images, labels = end_to_end_model(seed=0)
    f = lambda _: cross_entropy_loss(model(images), labels)
    for name, param in model.trainable_parameters().items():
        assert finite_difference_check(f, param, floor=1e-6, max_elements=6) <= 1e-4, name


def test_end_to_end_model_biases_are_nonzero():
    model, _, _ = end_to_end_model(seed=0)
    biases = {name: t.data for name, t in model.parameters().items() if name.endswith("bias")}
    assert "backbone.stage1.bias" in biases and "fcssam.sc_max.0.depthwise_bias" in biases
    for name, values in biases.items():
        assert np.all(values != 0.0), name


def test_default_seed_full_model_gradcheck_passes():
    [result] = run_suite(seed=0, ops=["fanet"])
    assert result.op == "fanet"
    assert result.passed, f"max relative error {result.error:.3e}"


def test_gap_features_compose_backbone_attention_and_mean(small_config, images):
    model = FaNet.build(small_config, seed=6)
    encoded = backbone_forward(images, small_config.backbone, model.backbone)
    attended, _ = fcssam_forward(encoded, model.fcssam)
    expected = attended.data.mean(axis=(1, 2))
    features = extract_gap_features(model, images).data
    np.testing.assert_allclose(features, expected, rtol=0, atol=1e-12)
    logits = forward(model, images).data
    np.testing.assert_allclose(logits, features @ model.head.weight.data + model.head.bias.data, rtol=0, atol=1e-12)
