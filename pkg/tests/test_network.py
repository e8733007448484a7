import json

import numpy as np
import pytest

from fairsqueeze.errors import DimensionError, ParameterError
from fairsqueeze.network import (
    CK48_SUMMARY,
    RAF100_SUMMARY,
    BatchNorm,
    Dense,
    Flatten,
    Model,
    Softmax,
    build_ck48,
    build_raf100,
    load_architecture,
)

import gradcheck


def shape_arithmetic(input_hw, cin, filters, kernels, units, classes):
    """Parameter counts from layer shapes alone: (trainable, buffers, prunable)."""
    trainable = buffers = prunable = 0
    h, w = input_hw
    for f, k in zip(filters, kernels):
        prunable += k * k * cin * f
        trainable += k * k * cin * f + f + 2 * f
        buffers += 2 * f
        cin = f
        h, w = h // 2, w // 2
    fan_in = h * w * cin
    for u in units:
        prunable += fan_in * u
        trainable += fan_in * u + u + 2 * u
        buffers += 2 * u
        fan_in = u
    prunable += fan_in * classes
    trainable += fan_in * classes + classes
    return trainable, buffers, prunable


CK48_PRUNABLE = 4_469_312  # frozen from shape_arithmetic


@pytest.fixture(scope="module")
def ck48():
    return build_ck48()


def test_ck48_counts(ck48):
    trainable, buffers, prunable = shape_arithmetic((48, 48), 1, (64, 128, 512, 512), (3, 5, 3, 3), (256, 512), 8)
    assert ck48.count_params() == trainable
    assert ck48.count_params(include_buffers=True) == trainable + buffers == 4_479_240
    assert sum(a.size for _, a, p in ck48.parameters() if p) == prunable == CK48_PRUNABLE


def test_raf100_counts():
    m = build_raf100()
    trainable, _, _ = shape_arithmetic((100, 100), 1, (64, 128, 512, 512), (3, 5, 3, 3), (256, 512), 7)
    assert m.count_params() == trainable == 8_013_703
    assert dict(m.summary())["flatten"] == (18432,)


def test_summaries_match_tables(ck48):
    assert ck48.summary()[:-1] == CK48_SUMMARY
    assert build_raf100().summary()[:-1] == RAF100_SUMMARY


def test_forward_is_a_probability_vector(ck48):
    p = ck48.forward(np.zeros((1, 48, 48, 1), np.float32))
    assert p.shape == (1, 8) and abs(p.sum() - 1) <= 1e-5
    q = build_raf100(width=0.125).forward(np.random.default_rng(0).random((2, 100, 100, 1), dtype=np.float32))
    assert q.shape == (2, 7) and np.allclose(q.sum(axis=1), 1, atol=1e-5) and np.all(q >= 0)


def test_bias_tensors_are_not_prunable(ck48):
    for name, _, prunable in ck48.parameters():
        assert prunable == name.endswith("/kernel")


def test_zero_head_gives_uniform_output(tiny_model):
    last = [l for l in tiny_model.layers if l.kind == "Dense"][-1]
    last.params["kernel"][:] = 0
    last.params["bias"][:] = 0
    p = tiny_model.forward(np.random.default_rng(0).random((4, 8, 8, 1)))
    assert np.allclose(p, 1 / 3, atol=1e-7)


def test_infer_is_deterministic(tiny_model):
    x = np.random.default_rng(0).random((4, 8, 8, 1), dtype=np.float32)
    assert np.array_equal(tiny_model.forward(x), tiny_model.forward(x))


def test_train_mode_batchnorm_normalizes():
    m = Model([Flatten(), Dense(6), BatchNorm(), Dense(2), Softmax()], (4, 4, 1), 2, seed=0).astype(np.float64)
    x = np.random.default_rng(1).normal(3.0, 2.0, (64, 4, 4, 1))
    bn = m.layers[2]
    z = m.layers[1].forward(x.reshape(64, -1))[0]
    normed = (z - z.mean(axis=0)) / np.sqrt(z.var(axis=0) + bn.epsilon)
    assert np.all(np.abs(normed.mean(axis=0)) <= 1e-4)
    assert np.all(np.abs(normed.var(axis=0) - 1) <= 1e-3)
    y = bn.forward(z, training=True)[0]
    expected = bn.params["gamma"] * normed + bn.params["beta"]
    assert np.allclose(y, expected, atol=1e-10)


def test_running_stats_update_only_in_train_mode(tiny_model):
    x = np.random.default_rng(0).random((8, 8, 8, 1), dtype=np.float32)
    before = tiny_model.get_tensor("batch_normalization/running_mean").copy()
    tiny_model.forward(x)
    assert np.array_equal(before, tiny_model.get_tensor("batch_normalization/running_mean"))
    tiny_model.forward(x, mode="train", rng=np.random.default_rng(0))
    assert not np.array_equal(before, tiny_model.get_tensor("batch_normalization/running_mean"))


def test_shape_mismatch_is_rejected(tiny_model):
    with pytest.raises(DimensionError):
        tiny_model.forward(np.zeros((1, 9, 8, 1)))


def test_config_round_trip(tmp_path, tiny_model):
    path = tmp_path / "arch.json"
    path.write_text(json.dumps(tiny_model.to_config()))
    again = load_architecture(path, seed=1)
    assert again.summary() == tiny_model.summary()
    for (n1, a1), (n2, a2) in zip(tiny_model.named_tensors(), again.named_tensors()):
        assert n1 == n2 and np.array_equal(a1, a2)


def test_last_layer_must_be_softmax():
    with pytest.raises(ParameterError):
        Model([Flatten(), Dense(2)], (2, 2, 1), 2)


def test_width_scaling_shrinks_model():
    assert build_ck48(width=0.25).count_params() < build_ck48(width=0.5).count_params()


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    m = gradcheck.every_kind_net(seed)
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(5, 6, 6, 2)), r.integers(0, 3, 5)
    worst, _, checked, skipped = gradcheck.check_model(m, x, y, seed=seed)
    assert worst <= 1e-3
    assert skipped <= 0.2 * (checked + skipped)
