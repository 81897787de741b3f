import json

import numpy as np
import pytest

from otadapt.model import (
    AdaptModel,
    GradientBuffer,
    ModelDims,
    SgdMomentum,
    backward_classify,
    backward_features,
    forward_classify,
    forward_features,
    load_checkpoint,
    predict_labels,
    save_checkpoint,
)

from helpers import central_difference, gradient_close, sample_param_coords

DIMS = ModelDims(d_in=5, g_hidden=7, g_out=4, n_out=3)


def _zeroed(model):
    for _, p in model.parameters():
        p[...] = 0.0
    return model


def test_zero_model_gives_zero_features():
    model = _zeroed(AdaptModel(DIMS, seed=0))
    x = np.random.default_rng(0).normal(size=(6, 5))
    np.testing.assert_array_equal(forward_features(model, x), np.zeros((6, 4)))


def test_single_unit_identity_composition():
    dims = ModelDims(1, 1, 1, 2)
    model = _zeroed(AdaptModel(dims, seed=0))
    model.w1[...] = 1.0
    model.w2[...] = 1.0
    x = np.array([[2.5], [-3.0]])
    z = forward_features(model, x)
    np.testing.assert_allclose(z, np.maximum(x, 0.0))


def test_forward_matches_independent_recomputation():
    model = AdaptModel(DIMS, seed=3)
    x = np.random.default_rng(1).normal(size=(8, 5))
    z = forward_features(model, x)
    by_hand = np.maximum(x @ model.w1 + model.b1, 0.0) @ model.w2 + model.b2
    np.testing.assert_allclose(z, by_hand, atol=1e-12)
    probs = forward_classify(model, z)
    logits = z @ model.wh + model.bh
    ref = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, ref, atol=1e-12)


def test_probabilities_normalized_and_saturating():
    model = AdaptModel(DIMS, seed=2)
    z = np.random.default_rng(5).normal(size=(10, 4))
    probs = forward_classify(model, z)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(probs >= 0.0)

    zero_logit_model = _zeroed(AdaptModel(DIMS, seed=0))
    uniform = forward_classify(zero_logit_model, z)
    np.testing.assert_allclose(uniform, 1.0 / 3.0, atol=1e-12)

    zero_logit_model.bh[0] = 50.0
    spiked = forward_classify(zero_logit_model, z)
    assert np.all(spiked[:, 0] > 1.0 - 1e-9)


def test_predict_labels_tie_break_lowest_index():
    model = _zeroed(AdaptModel(DIMS, seed=0))
    x = np.random.default_rng(0).normal(size=(4, 5))
    np.testing.assert_array_equal(predict_labels(model, x), np.ones(4, int))


def test_dim_mismatch_raises():
    model = AdaptModel(DIMS, seed=0)
    with pytest.raises(ValueError):
        forward_features(model, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        forward_classify(model, np.zeros((2, 5)))


def test_backward_requires_cache():
    model = AdaptModel(DIMS, seed=0)
    with pytest.raises(ValueError):
        backward_features(model, None, np.zeros((2, 4)), GradientBuffer(model))


def test_zero_upstream_gradient_gives_zero_buffer():
    model = AdaptModel(DIMS, seed=1)
    x = np.random.default_rng(2).normal(size=(3, 5))
    _, cache = forward_features(model, x, return_cache=True)
    buf = GradientBuffer(model)
    backward_features(model, cache, np.zeros((3, 4)), buf)
    assert buf.global_norm() == 0.0


def test_single_parameter_quadratic_gradient():
    dims = ModelDims(1, 1, 1, 2)
    model = _zeroed(AdaptModel(dims, seed=0))
    model.w1[...] = 1.0
    model.w2[...] = 2.0  # z = 2 * relu(x * w1)
    x = np.array([[1.0]])
    target = 3.0
    z, cache = forward_features(model, x, return_cache=True)
    # loss = (z - target)^2, dL/dz = 2 (z - target)
    buf = GradientBuffer(model)
    backward_features(model, cache, 2.0 * (z - target), buf)
    # dL/dw2 = 2 (z - t) * relu(x) = 2 (2 - 3) * 1 = -2
    assert buf.w2[0, 0] == pytest.approx(-2.0)
    # dL/dw1 = 2 (z - t) * w2 * x = -4
    assert buf.w1[0, 0] == pytest.approx(-4.0)


def test_backward_matches_finite_differences_on_scalar_loss():
    model = AdaptModel(DIMS, seed=9)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(12, 5))
    labels = rng.integers(1, 4, size=12)
    onehot = np.zeros((12, 3))
    onehot[np.arange(12), labels - 1] = 1.0

    def value():
        z = forward_features(model, x)
        probs = forward_classify(model, z)
        return float(-(onehot * np.log(probs)).sum() / 12.0)

    z, g_cache = forward_features(model, x, return_cache=True)
    probs, h_cache = forward_classify(model, z, return_cache=True)
    buf = GradientBuffer(model)
    d_logits = (probs - onehot) / 12.0
    d_z = backward_classify(model, h_cache, d_logits, buf)
    backward_features(model, g_cache, d_z, buf)

    for name, idx in sample_param_coords(model, 30, seed=1):
        numeric = central_difference(value, getattr(model, name), idx)
        analytic = getattr(buf, name)[idx]
        assert gradient_close(analytic, numeric), (name, idx, analytic, numeric)


def test_sgd_step_identities():
    model = AdaptModel(DIMS, seed=0)
    before = {n: p.copy() for n, p in model.parameters()}
    opt = SgdMomentum(lr=1.0, momentum=0.0, grad_clip=1e9)
    opt.step(model, GradientBuffer(model))
    for name, p in model.parameters():
        np.testing.assert_array_equal(p, before[name])

    grads = GradientBuffer(model)
    grads.w1 += 0.5
    opt.step(model, grads)
    np.testing.assert_allclose(model.w1, before["w1"] - 0.5, atol=1e-15)


def test_momentum_recurrence_doubles_step():
    model = _zeroed(AdaptModel(DIMS, seed=0))
    opt = SgdMomentum(lr=1.0, momentum=0.9, grad_clip=1e9)
    grads = GradientBuffer(model)
    grads.b1 += 1.0
    opt.step(model, grads)
    first = -model.b1.copy()
    grads = GradientBuffer(model)
    grads.b1 += 1.0
    opt.step(model, grads)
    second = -model.b1.copy() - first
    np.testing.assert_allclose(second, 1.9 * first, atol=1e-12)


def test_gradient_clipping_rescales_global_norm():
    model = _zeroed(AdaptModel(DIMS, seed=0))
    opt = SgdMomentum(lr=1.0, momentum=0.0, grad_clip=1.0)
    grads = GradientBuffer(model)
    grads.b1 += 3.0
    norm = grads.global_norm()
    opt.step(model, grads)
    np.testing.assert_allclose(-model.b1, 3.0 / norm, atol=1e-12)


def test_non_finite_gradient_refused():
    model = AdaptModel(DIMS, seed=0)
    opt = SgdMomentum(lr=0.1)
    grads = GradientBuffer(model)
    grads.w2[0, 0] = np.nan
    with pytest.raises(ValueError, match="w2"):
        opt.step(model, grads)


def test_parameter_count_matches_dims():
    model = AdaptModel(DIMS, seed=0)
    expected = 5 * 7 + 7 + 7 * 4 + 4 + 4 * 3 + 3
    assert model.n_parameters() == expected


def test_seeded_init_deterministic():
    a = AdaptModel(DIMS, seed=123)
    b = AdaptModel(DIMS, seed=123)
    for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = AdaptModel(DIMS, seed=77)
    path = tmp_path / "model.json"
    save_checkpoint(model, path, extra={"epoch": 3})
    loaded, extra = load_checkpoint(path)
    assert extra["epoch"] == 3
    assert loaded.dims == model.dims
    for (_, pa), (_, pb) in zip(model.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(pa, pb)
    # second save of the loaded model reproduces the file byte for byte
    path2 = tmp_path / "model2.json"
    save_checkpoint(loaded, path2, extra={"epoch": 3})
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_schema_guard(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(path)
