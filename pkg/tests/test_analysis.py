import csv

import numpy as np
import pytest

from fairsqueeze.analysis import histogram, pruning_gap_stats, tradeoff_table, weight_histogram, write_histogram_csv
from fairsqueeze.audit import report_from_predictions
from fairsqueeze.data import GroupedDataset
from fairsqueeze.errors import ParameterError
from fairsqueeze.pruning import prune


def scan_and_bin(v, lo, hi, n):
    counts = [0] * n
    width = (hi - lo) / n
    for x in v:
        i = int((x - lo) // width)
        counts[min(max(i, 0), n - 1)] += 1
    return counts


def test_histogram_matches_scan_oracle(rng):
    v = rng.standard_normal(5000)
    h = histogram(v, 101)
    assert h.counts.sum() == 5000 and len(h.bin_edges) == 102
    oracle = scan_and_bin(v, v.min(), v.max(), 101)
    # float edge placement may move a value sitting exactly on an edge by one bin
    assert np.abs(h.counts - oracle).sum() <= 2


def test_constant_tensor_single_bin():
    h = histogram(np.full(20, 0.3), 11)
    assert (h.counts > 0).sum() == 1 and h.counts.sum() == 20


def test_symmetric_range():
    h = histogram(np.array([-0.1, 0.4]), 4, symmetric=True)
    assert h.bin_edges[0] == -0.4 and h.bin_edges[-1] == 0.4


def test_pruned_layer_has_mass_at_zero(tiny_model):
    pruned, _ = prune(tiny_model, 0.6, per_layer=True)
    h = weight_histogram(pruned, "dense")
    zero_bin = np.searchsorted(h.bin_edges, 0.0, side="right") - 1
    assert h.counts[zero_bin] >= int(0.6 * h.counts.sum())
    with pytest.raises(KeyError):
        weight_histogram(pruned, "nope")


def test_histogram_csv(tmp_path, tiny_model):
    write_histogram_csv(weight_histogram(tiny_model, "conv2d", 5), tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["bin_left", "bin_right", "count"] and len(rows) == 6
    assert sum(int(r[2]) for r in rows[1:]) == tiny_model.get_tensor("conv2d/kernel").size


def test_gap_stats_examples(rng):
    s = pruning_gap_stats(rng.standard_normal(100), 0.0)
    assert s.threshold == 0 and s.removed_mass == 0
    w = np.concatenate([np.ones(25), -np.ones(25), np.zeros(50)])
    s = pruning_gap_stats(w, 0.5)
    assert s.threshold == 0 and s.removed_mass == 0
    with pytest.raises(ParameterError):
        pruning_gap_stats(w, 1.0)


@pytest.mark.parametrize("s", [0.1, 0.37, 0.6, 0.95])
def test_threshold_is_order_statistic(rng, s):
    w = rng.standard_normal(1001)
    st = pruning_gap_stats(w, s)
    k = int(np.floor(s * 1001))
    full = sorted(abs(x) for x in w)
    assert st.threshold == full[k - 1] and st.n_pruned == k
    assert st.removed_mass == pytest.approx(sum(full[:k]))


def test_gap_stats_agree_with_prune(tiny_model):
    st = pruning_gap_stats(tiny_model, 0.6)
    pruned, mask = prune(tiny_model, 0.6)
    assert mask.n_pruned == st.n_pruned
    removed = sum(float(np.abs(tiny_model.get_tensor(n))[~k].sum()) for n, k in mask.masks.items())
    assert removed == pytest.approx(st.removed_mass)


def _report(label, size, params):
    ds = GroupedDataset(np.zeros((2, 1, 1, 1), np.float32), np.array([0, 1]), np.array(["a", "b"], dtype=object), {"gender": np.array(["f", "m"], dtype=object)})
    return report_from_predictions(label, np.array([0, 0]), ds, ["gender"], size_bytes=size, params=params)


def test_tradeoff_table_sorted_by_sweep():
    rows = tradeoff_table([_report("b", 50, {"sparsity": 0.5}), _report("a", 90, {"sparsity": 0.1})], "sparsity")
    assert [r["Model"] for r in rows] == ["a", "b"]
    assert {"Size (MB)", "Overall acc.", "Female acc.", "Male acc."} <= set(rows[0])
    assert len(tradeoff_table([_report("x", 1, {})])) == 1
    with pytest.raises(ParameterError):
        tradeoff_table([])
