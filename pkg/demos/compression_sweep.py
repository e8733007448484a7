# %% [markdown]
# Compression sweep on a synthetic two-group expression task.
#
# Train one small CNN, then prune it at 10..90% and cluster it at 4..128
# shared values. For each variant we record the deflated file size, overall
# accuracy and the accuracy gap between the two groups. Group "f" is drawn
# with extra noise, so it is the harder group.
#
#     python demos/compression_sweep.py [out_dir]

# %%
import sys
import tempfile
from pathlib import Path

import numpy as np

from fairsqueeze.analysis import tradeoff_table, write_rows_csv
from fairsqueeze.audit import evaluate, report_from_predictions
from fairsqueeze.clustering import cluster, finetune_clustered
from fairsqueeze.data import SyntheticSpec, generate_synthetic, split_by_subject
from fairsqueeze.network import Model
from fairsqueeze.pruning import finetune_pruned, prune
from fairsqueeze.quantization import quantize_model
from fairsqueeze.store import measure_size, save
from fairsqueeze.trainer import TrainConfig, fit

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="sweep-"))
out.mkdir(parents=True, exist_ok=True)

# %% data: 70/30 groups, the minority group is noisier
groups = {"gender": {"m": 0.7, "f": 0.3}}
hard = {"gender": {"f": 0.35}}
ds = generate_synthetic(SyntheticSpec(2000, 3, attributes=groups, difficulty=hard, noise=0.45, seed=5))
test = generate_synthetic(SyntheticSpec(600, 3, attributes=groups, difficulty=hard, noise=0.45, seed=6))
train, val = split_by_subject(ds, 0.2, seed=5)
print(f"train {len(train)}, val {len(val)}, test {len(test)}")

# %% baseline
arch = {
    "input_shape": [16, 16, 1],
    "num_classes": 3,
    "layers": [
        {"kind": "Conv2D", "filters": 8, "kernel_size": 3}, {"kind": "BatchNorm"},
        {"kind": "Activation", "function": "relu"}, {"kind": "MaxPool"},
        {"kind": "Conv2D", "filters": 16, "kernel_size": 3}, {"kind": "BatchNorm"},
        {"kind": "Activation", "function": "relu"}, {"kind": "MaxPool"},
        {"kind": "Flatten"}, {"kind": "Dense", "units": 32}, {"kind": "BatchNorm"},
        {"kind": "Activation", "function": "relu"}, {"kind": "Dropout", "rate": 0.25},
        {"kind": "Dense", "units": 3}, {"kind": "Softmax"},
    ],
}
baseline, log = fit(Model.from_config(arch, seed=5), train, val, TrainConfig(epochs=20, seed=5))
print(f"baseline: best val acc {log.best_val_accuracy:.3f} at epoch {log.best_epoch}")
finetune = TrainConfig(epochs=2, seed=6)


def row(model, label, path, params, clusters=None):
    save(model, path, clusters=clusters)
    size = measure_size(path).deflated_bytes
    return report_from_predictions(label, evaluate(model, test), test, ["gender"], size, params)


reports = [row(baseline, "baseline", out / "baseline.nncm", {"sparsity": 0.0})]

# %% pruning sweep, each level fine-tuned for two epochs with the mask held fixed
for pct in range(10, 100, 10):
    pruned, mask = prune(baseline, pct / 100)
    pruned = finetune_pruned(pruned, mask, train, val, finetune)
    reports.append(row(pruned, f"pruned ({pct}%)", out / f"pruned{pct}.nncm", {"sparsity": pct / 100}))
    q = quantize_model(pruned)
    reports.append(row(q, f"pruned ({pct}%) + quant.", out / f"pruned{pct}.quant.nncm", {"sparsity": pct / 100}))

rows = tradeoff_table(reports, "sparsity")
write_rows_csv(rows, out / "pruning_tradeoff.csv")
for r in rows:
    print(f"{r['Model']:<24} {r['Size (MB)']:.4f} MB  acc {r['Overall acc.']:6.2f}  gap {r['Gender gap']:5.2f}")

# %% clustering sweep; fine-tuning only moves the shared values
creports = []
for n in (4, 8, 16, 32, 64, 128):
    clustered, cw = cluster(baseline, n)
    clustered, cw = finetune_clustered(clustered, cw, train, val, finetune)
    creports.append(row(clustered, f"clust. ({n} cl.)", out / f"clust{n}.nncm", {"clusters": n}, clusters=cw))
rows = tradeoff_table(creports, "clusters")
write_rows_csv(rows, out / "clustering_tradeoff.csv")
for r in rows:
    print(f"{r['Model']:<24} {r['Size (MB)']:.4f} MB  acc {r['Overall acc.']:6.2f}  gap {r['Gender gap']:5.2f}")

# %%
sizes = np.array([r.size_bytes for r in creports])
print(f"4 clusters is {reports[0].size_bytes / sizes[0]:.1f}x smaller than the baseline file after DEFLATE")
print(f"CSVs in {out}")
