# %% [markdown]
# Why does pruning hurt one model more than another?
#
# Magnitude pruning at 60% zeroes the 60% smallest weights. If the weights
# bunch tightly around zero, those weights were nearly zero already. If they
# spread widely, pruning cuts out a wide band around zero and removes real
# signal. This script compares a narrow and a wide weight distribution and
# writes histograms for plotting.
#
#     python demos/weight_spread.py [out_dir]

# %%
import sys
import tempfile
from pathlib import Path

import numpy as np

from fairsqueeze.analysis import pruning_gap_stats, weight_histogram, write_histogram_csv
from fairsqueeze.network import build_ck48
from fairsqueeze.pruning import prune

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="spread-"))
out.mkdir(parents=True, exist_ok=True)


def with_std(std, seed=0):
    m = build_ck48(width=0.125, seed=seed)
    r = np.random.default_rng(seed)
    for name, arr, prunable in m.parameters():
        if prunable:
            m.set_tensor(name, r.normal(0.0, std, arr.shape).astype(np.float32))
    return m


# %% gap statistics at 60% sparsity
for label, std in (("narrow", 0.01), ("wide", 0.5)):
    model = with_std(std)
    st = pruning_gap_stats(model, 0.6)
    print(f"{label:>6}: threshold {st.threshold:.5f}, removed sum|w| {st.removed_mass:10.3f} "
          f"of {st.total_mass:10.3f} ({st.removed_fraction:.3f})")
    write_histogram_csv(weight_histogram(model, "dense", symmetric=True), out / f"{label}_dense.csv")
    pruned, _ = prune(model, 0.6)
    write_histogram_csv(weight_histogram(pruned, "dense", symmetric=True), out / f"{label}_dense_pruned60.csv")

# %% [markdown]
# The share of mass removed is the same for both: a Gaussian's shape does not
# depend on its scale. The absolute band that gets zeroed is 50x wider for the
# wide model, and so is the mass it takes out. Trained networks are not
# Gaussian. A narrow trained layer often has extra mass piled near zero, and
# that is where the difference in robustness comes from.

# %%
print(f"histograms in {out}")
