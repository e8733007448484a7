import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairsqueeze.errors import IntegrityError, ParameterError
from fairsqueeze.network import Dense, Flatten, Model, Softmax
from fairsqueeze.pruning import MaskConstraint, check_mask, finetune_pruned, prune, prunable_zero_fraction
from fairsqueeze.trainer import TrainConfig, fit


def linear_model(kernel):
    kernel = np.asarray(kernel, dtype=np.float32)
    m = Model([Flatten(), Dense(kernel.shape[1]), Softmax()], (1, 1, kernel.shape[0]), kernel.shape[1])
    m.set_tensor("dense/kernel", kernel)
    return m


def test_sparsity_zero_is_identity(tiny_model):
    pruned, mask = prune(tiny_model, 0.0)
    assert mask.n_pruned == 0
    for (_, a), (_, b) in zip(tiny_model.named_tensors(), pruned.named_tensors()):
        assert np.array_equal(a, b)


def test_two_smallest_are_zeroed():
    m = linear_model([[0.1, -0.5], [0.02, 0.9]])
    pruned, _ = prune(m, 0.5)
    assert pruned.get_tensor("dense/kernel").ravel().tolist() == pytest.approx([0, -0.5, 0, 0.9])


def test_random_model_matches_sort_oracle():
    w = np.random.default_rng(0).standard_normal((100, 100))
    pruned, mask = prune(linear_model(w), 0.6)
    out = pruned.get_tensor("dense/kernel")
    assert abs(prunable_zero_fraction(pruned) - 0.6) <= 1e-4
    kept = np.abs(out[mask.masks["dense/kernel"]])
    removed = np.abs(w.astype(np.float32)[~mask.masks["dense/kernel"]])
    assert kept.min() >= removed.max()
    oracle = np.sort(np.abs(w.astype(np.float32)).ravel())[:6000]
    assert np.array_equal(np.sort(removed), oracle)


def test_biases_untouched(tiny_model):
    pruned, _ = prune(tiny_model, 0.9)
    for name, arr, prunable in tiny_model.parameters():
        if not prunable:
            assert np.array_equal(arr, pruned.get_tensor(name))


def test_ties_break_by_position():
    pruned, _ = prune(linear_model(np.ones((2, 2))), 0.5)
    assert pruned.get_tensor("dense/kernel").ravel().tolist() == [0, 0, 1, 1]


def test_per_layer_mode(tiny_model):
    pruned, mask = prune(tiny_model, 0.5, per_layer=True)
    for name, keep in mask.masks.items():
        assert (~keep).sum() == keep.size // 2


@pytest.mark.parametrize("s", [-0.1, 1.0, 1.5])
def test_invalid_sparsity(tiny_model, s):
    with pytest.raises(ParameterError):
        prune(tiny_model, s)


def test_check_mask_detects_regrowth(tiny_model):
    pruned, mask = prune(tiny_model, 0.5)
    w = pruned.get_tensor("dense/kernel")
    w[~mask.masks["dense/kernel"]] = 1.0
    with pytest.raises(IntegrityError):
        check_mask(pruned, mask)


def _data(seed, n=64):
    r = np.random.default_rng(seed)
    x = r.random((n, 8, 8, 1), dtype=np.float32)
    y = (x[:, :4].mean(axis=(1, 2, 3)) > x[:, 4:].mean(axis=(1, 2, 3))).astype(np.int64) % 3
    return x, y


def test_finetune_preserves_zero_count(tiny_model):
    pruned, mask = prune(tiny_model, 0.5)
    before = sum(int((a == 0).sum()) for _, a, p in pruned.parameters() if p)
    tuned = finetune_pruned(pruned, mask, _data(0), _data(1), TrainConfig(epochs=2))
    after = sum(int((a == 0).sum()) for _, a, p in tuned.parameters() if p)
    assert after == before
    check_mask(tuned, mask)


def test_all_ones_mask_equals_plain_finetune(tiny_model):
    pruned, mask = prune(tiny_model, 0.0)
    cfg = TrainConfig(epochs=2)
    a = finetune_pruned(pruned, mask, _data(0), _data(1), cfg)
    b, _ = fit(tiny_model, _data(0), _data(1), cfg)
    for (_, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
        assert np.array_equal(x, y)


def test_mask_constraint_zeroes_gradients():
    mask = prune(linear_model([[0.1, 2.0]]), 0.5)[1]
    g = MaskConstraint(mask).project(["dense/kernel", "dense/bias"], [np.ones((1, 2)), np.ones(2)])
    assert g[0].tolist() == [[0, 1]] and g[1].tolist() == [1, 1]


@settings(max_examples=40, deadline=None)
@given(
    rows=st.integers(1, 12),
    cols=st.integers(1, 12),
    s=st.floats(0.0, 0.99),
    seed=st.integers(0, 2**31),
)
def test_prune_count_and_order_property(rows, cols, s, seed):
    w = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
    pruned, mask = prune(linear_model(w), s)
    n = w.size
    assert mask.n_pruned == int(np.floor(s * n + 1e-9))
    keep = mask.masks["dense/kernel"]
    if keep.any() and (~keep).any():
        assert np.abs(w[keep]).min() >= np.abs(w[~keep]).max()
