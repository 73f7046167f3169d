import numpy as np
import pytest

from ridg import autodiff
from ridg.autodiff import Tensor, backward, tsum
from ridg.errors import ConfigError, DimensionError
from ridg.model import (LinearHead, ModelConfig, forward_features, forward_logits,
                        init_model, load_checkpoint, parameters, save_checkpoint)
from ridg.rationale import build_rationale

from oracles import assert_close_to_fd, central_difference, loop_logits


def small_config(**kw):
    base = dict(input_dim=3, hidden=(4,), feature_dim=2, class_count=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def test_zero_weight_network_gives_zero_features():
    extractor, _ = init_model(small_config())
    for w in extractor.weights:
        w.data = np.zeros_like(w.data)
    for b in extractor.biases:
        b.data = np.zeros_like(b.data)
    z = forward_features(extractor, np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(z.data, np.zeros((5, 2)))


def test_identity_single_layer_passes_input_through():
    extractor, _ = init_model(ModelConfig(input_dim=3, hidden=(), feature_dim=3,
                                          class_count=2, seed=1))
    extractor.weights[0].data = np.eye(3)
    extractor.biases[0].data = np.zeros(3)
    x = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(forward_features(extractor, x).data, x)


def test_forward_features_checks_input_dim():
    extractor, _ = init_model(small_config())
    with pytest.raises(DimensionError):
        forward_features(extractor, np.zeros((2, 5)))


def test_feature_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    extractor, _ = init_model(small_config())
    x = rng.normal(size=(4, 3))

    def loss():
        return tsum(forward_features(extractor, x)).data

    out = tsum(forward_features(extractor, x))
    backward(out)
    w0 = extractor.weights[0]
    (fd,) = central_difference(loss, [w0.data])
    assert_close_to_fd(w0.grad, fd)


def test_logits_identity_weight():
    head = LinearHead(Tensor(np.eye(2), requires_grad=True))
    out = forward_logits(head, Tensor([[3.0, 7.0]]))
    np.testing.assert_array_equal(out.data, [[3.0, 7.0]])


def test_logits_all_ones_weight():
    head = LinearHead(Tensor(np.ones((2, 3)), requires_grad=True))
    out = forward_logits(head, Tensor([[1.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[3.0, 3.0, 3.0]])


def test_logits_match_scalar_loop():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    head = LinearHead(Tensor(w, requires_grad=True))
    got = forward_logits(head, Tensor(z)).data
    np.testing.assert_allclose(got, loop_logits(z, w), atol=1e-12, rtol=0)


def test_logits_dimension_error():
    head = LinearHead(Tensor(np.ones((2, 3)), requires_grad=True))
    with pytest.raises(DimensionError):
        forward_logits(head, Tensor(np.zeros((1, 4))))


def test_init_deterministic_per_seed():
    e1, h1 = init_model(small_config(seed=42))
    e2, h2 = init_model(small_config(seed=42))
    for a, b in zip(parameters(e1, h1), parameters(e2, h2)):
        assert np.array_equal(a.data, b.data)


def test_init_differs_across_seeds():
    e1, h1 = init_model(small_config(seed=1))
    e2, h2 = init_model(small_config(seed=2))
    assert any(not np.array_equal(a.data, b.data)
               for a, b in zip(parameters(e1, h1), parameters(e2, h2)))


def test_init_respects_fan_in_bound():
    cfg = ModelConfig(input_dim=9, hidden=(16,), feature_dim=4, class_count=3, seed=5)
    extractor, head = init_model(cfg)
    assert np.abs(extractor.weights[0].data).max() <= 1.0 / np.sqrt(9)
    assert np.abs(extractor.weights[1].data).max() <= 1.0 / np.sqrt(16)
    assert np.abs(head.weight.data).max() <= 1.0 / np.sqrt(4)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_dim=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(input_dim=2, class_count=1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(input_dim=2, hidden=(0,)).validate()


@pytest.mark.parametrize("precision,tol", [("f64", 1e-10), ("f32", 1e-4)])
def test_decomposition_identity(precision, tol):
    autodiff.set_default_dtype(precision)
    try:
        rng = np.random.default_rng(8)
        extractor, head = init_model(ModelConfig(input_dim=6, hidden=(8,),
                                                 feature_dim=5, class_count=3, seed=8))
        x = rng.normal(size=(7, 6))
        z = forward_features(extractor, x)
        logits = forward_logits(head, z)
        contributions = build_rationale(z, head.weight)
        np.testing.assert_allclose(contributions.data.sum(axis=2).T, logits.data,
                                   atol=tol, rtol=0)
    finally:
        autodiff.set_default_dtype("f64")


def test_logits_exactly_linear_in_features():
    rng = np.random.default_rng(9)
    head = LinearHead(Tensor(rng.normal(size=(4, 3)), requires_grad=True))
    z = rng.normal(size=(5, 4))
    once = forward_logits(head, Tensor(z)).data
    doubled = forward_logits(head, Tensor(2.0 * z)).data
    assert np.array_equal(doubled, 2.0 * once)


def test_checkpoint_round_trip(tmp_path):
    extractor, head = init_model(small_config(seed=13))
    path = tmp_path / "model.json"
    save_checkpoint(extractor, head, path, seed=13, extra={"feature_mean": [0.0] * 3})
    loaded_extractor, loaded_head, meta = load_checkpoint(path)
    for a, b in zip(parameters(extractor, head),
                    parameters(loaded_extractor, loaded_head)):
        assert np.array_equal(a.data, b.data)
    assert meta["seed"] == 13
    assert meta["precision"] == "f64"
    assert meta["extra"]["feature_mean"] == [0.0, 0.0, 0.0]


def test_forward_np_matches_tape_forward():
    rng = np.random.default_rng(10)
    extractor, head = init_model(small_config(seed=3))
    x = rng.normal(size=(6, 3))
    z_tape = forward_features(extractor, x).data
    np.testing.assert_array_equal(extractor.forward_np(x), z_tape)
    np.testing.assert_array_equal(head.logits_np(z_tape),
                                  forward_logits(head, Tensor(z_tape)).data)
