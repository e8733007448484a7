"""Compress small facial-expression CNNs (pruning, clustering, int8 quantization)
and measure how the compression shifts accuracy across demographic groups."""
from .analysis import pruning_gap_stats, tradeoff_table, weight_histogram
from .audit import build_report, evaluate, gap, group_accuracies
from .clustering import cluster, finetune_clustered, kmeans_1d
from .data import GroupedDataset, SyntheticSpec, generate_synthetic, load_manifest, preprocess, split_by_subject
from .network import Model, build_ck48, build_raf100, load_architecture
from .pruning import finetune_pruned, prune
from .quantization import quantize_model
from .store import load, measure_size, save
from .trainer import TrainConfig, fit

__version__ = "0.1.0"
