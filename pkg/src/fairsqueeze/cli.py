"""Command-line entry point: synthetic data, training, compression, audits.

Every subcommand takes ``--seed``; each stage draws from its own keyed stream
of that seed, so a command repeated with the same flags writes the same bytes.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, audit, store
from .clustering import cluster, finetune_clustered
from .data import GroupedDataset, SyntheticSpec, generate_synthetic, load_manifest, split_by_subject, write_dataset
from .errors import FairsqueezeError, PlanError
from .network import Model, build_ck48, build_raf100, load_architecture
from .pruning import finetune_pruned, prune
from .quantization import QuantizedModel, quantize_model
from .tensor import make_rng
from .trainer import TrainConfig, fit

log = logging.getLogger("fairsqueeze")


def stage_seed(seed: int, *keys) -> int:
    return int(make_rng(seed, *keys).integers(2**63))


def parse_groups(text: str) -> dict[str, float]:
    """``"m:0.7,f:0.3"`` -> ``{"m": 0.7, "f": 0.3}``."""
    out = {}
    for part in text.split(","):
        name, sep, value = part.partition(":")
        if not sep or not name.strip():
            raise argparse.ArgumentTypeError(f"expected GROUP:VALUE, got {part!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number in {part!r}") from None
    return out


def parse_attr(text: str) -> tuple[str, dict[str, float]]:
    """``"race=a:0.5,b:0.3,c:0.2"`` -> ``("race", {...})``."""
    name, sep, groups = text.partition("=")
    if not sep or not name.strip():
        raise argparse.ArgumentTypeError(f"expected NAME=GROUP:P,..., got {text!r}")
    return name.strip(), parse_groups(groups)


def percent(text: str) -> int:
    value = int(text)
    if not 0 <= value < 100:
        raise argparse.ArgumentTypeError(f"sparsity percent must lie in [0, 100), got {value}")
    return value


class StepAction(argparse.Action):
    """Collects --prune/--cluster/--quantize into one list in command-line order."""

    def __call__(self, parser, namespace, values, option_string=None):
        steps = list(getattr(namespace, self.dest, None) or [])
        steps.append((self.metavar, values))
        setattr(namespace, self.dest, steps)


def build_model(arch: str, seed: int, width: float = 1.0, channels: int | None = None) -> Model:
    if arch == "ck48":
        return build_ck48(width=width, seed=seed)
    if arch == "raf100":
        return build_raf100(width=width, channels=channels or 1, seed=seed)
    if Path(arch).is_file():
        return load_architecture(arch, seed=seed)
    raise FairsqueezeError(f"--arch must be ck48, raf100 or a JSON architecture file; got {arch!r}")


def load_for_model(manifest: str, model, image_root: str | None = None) -> GroupedDataset:
    h, w, c = model.input_shape
    return load_manifest(manifest, image_root=image_root, size=(h, w), grayscale=c == 1, channels=c)


def plan_label(steps) -> str:
    parts = []
    for kind, value in steps:
        if kind == "prune":
            parts.append(f"pruned ({value}%)")
        elif kind == "cluster":
            parts.append(f"clust. ({value} cl.)")
        else:
            parts.append("quant.")
    return " + ".join(parts)


def check_plan(steps) -> None:
    if not steps:
        raise PlanError("no compression step given; use --prune, --cluster and/or --quantize")
    for i, (kind, _) in enumerate(steps):
        if kind == "quantize" and i != len(steps) - 1:
            raise PlanError("--quantize must be the last step: a quantized model cannot be compressed further")
    for kind, value in steps:
        if kind == "cluster" and not 2 <= value <= 256:
            raise PlanError(f"--cluster needs 2..256 clusters, got {value}")


def _size_line(path: Path) -> str:
    s = store.measure_size(path)
    return f"{path}: raw {s.raw_bytes} B ({s.raw_mb:.6f} MB), deflated {s.deflated_bytes} B ({s.deflated_mb:.6f} MB)"


# --- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    attributes = {args.attribute: args.groups}
    for name, groups in args.attr or []:
        attributes[name] = groups
    spec = SyntheticSpec(
        n_samples=args.samples,
        n_classes=args.classes,
        attributes=attributes,
        difficulty={args.attribute: args.difficulty} if args.difficulty else {},
        image_size=args.image_size,
        channels=args.channels,
        noise=args.noise,
        samples_per_subject=args.per_subject,
        seed=args.seed,
    )
    ds = generate_synthetic(spec)
    manifest = write_dataset(ds, args.out)
    counts = ", ".join(f"{g}={n}" for g, n in ds.group_counts(args.attribute).items())
    print(f"wrote {len(ds)} images and {manifest} ({args.attribute}: {counts})")
    return 0


def cmd_train(args) -> int:
    model = build_model(args.arch, seed=stage_seed(args.seed, "init"), width=args.width, channels=args.channels)
    ds = load_for_model(args.manifest, model, args.image_root)
    train_set, val_set = split_by_subject(ds, args.val_fraction, seed=stage_seed(args.seed, "split"))
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        augment=not args.no_augment,
        seed=stage_seed(args.seed, "train"),
    )
    best, history = fit(model, train_set, val_set, config)
    best.metadata = {
        "label": args.label,
        "arch": args.arch if args.arch in ("ck48", "raf100") else Path(args.arch).name,
        "class_names": ds.class_names,
        "best_epoch": history.best_epoch,
        "val_accuracy": history.best_val_accuracy,
        "seed": args.seed,
        "params": {},
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    store.save(best, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    history.to_csv(log_path)
    print(_size_line(out))
    print(f"best epoch {history.best_epoch}: val_acc {history.best_val_accuracy:.4f}")
    return 0


def cmd_compress(args) -> int:
    steps = args.steps or []
    check_plan(steps)
    needs_data = not args.no_finetune and any(kind != "quantize" for kind, _ in steps)
    if needs_data and not args.manifest:
        raise PlanError("fine-tuning after prune/cluster needs --manifest (or pass --no-finetune)")
    current = store.load(args.model)
    if isinstance(current, QuantizedModel):
        raise PlanError(f"{args.model} is already quantized and cannot be compressed further")
    train_set = val_set = None
    if needs_data:
        ds = load_for_model(args.manifest, current, args.image_root)
        train_set, val_set = split_by_subject(ds, args.val_fraction, seed=stage_seed(args.seed, "split"))

    out_dir = Path(args.out_dir) if args.out_dir else Path(args.model).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = args.prefix or Path(args.model).stem
    base_meta = dict(current.metadata)
    params: dict[str, float] = {}
    tags = []
    for i, (kind, value) in enumerate(steps):
        cw = None
        if kind == "prune":
            current, mask = prune(current, value / 100.0, per_layer=args.per_layer)
            if not args.no_finetune:
                cfg = TrainConfig(epochs=args.finetune_epochs, batch_size=args.batch_size, learning_rate=args.lr,
                                  augment=not args.no_augment, seed=stage_seed(args.seed, "compress", i))
                current = finetune_pruned(current, mask, train_set, val_set, cfg)
            params["sparsity"] = value / 100.0
            tags.append(f"pruned{value}")
        elif kind == "cluster":
            current, cw = cluster(current, value, init=args.init, scope=args.scope, seed=stage_seed(args.seed, "cluster", i))
            if not args.no_finetune:
                cfg = TrainConfig(epochs=args.finetune_epochs, batch_size=args.batch_size, learning_rate=args.lr,
                                  augment=not args.no_augment, seed=stage_seed(args.seed, "compress", i))
                current, cw = finetune_clustered(current, cw, train_set, val_set, cfg)
            params["clusters"] = value
            tags.append(f"clust{value}")
        else:
            current = quantize_model(current)
            params["quantized"] = 1
            tags.append("quant")
        label = plan_label(steps[: i + 1])
        current.metadata.clear()
        current.metadata.update(base_meta, label=label, params=dict(params))
        path = out_dir / f"{stem}.{'.'.join(tags)}.nncm"
        store.save(current, path, clusters=cw)
        print(f"[{label}] {_size_line(path)}")
    return 0


def cmd_evaluate(args) -> int:
    model = store.load(args.model)
    ds = load_for_model(args.manifest, model, args.image_root)
    preds = audit.evaluate(model, ds)
    acc = float(np.mean(preds == ds.labels)) if len(ds) else float("nan")
    print(f"{args.model}: accuracy {acc:.4f} on {len(ds)} samples")
    return 0


def cmd_audit(args) -> int:
    attributes = [a.strip() for a in args.attributes.split(",") if a.strip()] if args.attributes else None
    reports = []
    cache: dict[tuple, GroupedDataset] = {}
    for path in args.models:
        model = store.load(path)
        key = tuple(model.input_shape)
        if key not in cache:
            cache[key] = load_for_model(args.manifest, model, args.image_root)
        ds = cache[key]
        attrs = attributes if attributes is not None else list(ds.attributes)
        reports.append(audit.build_report(path, ds, attrs))
    rows = analysis.tradeoff_table(reports)
    csv_path = Path(args.csv)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    audit.write_csv(reports, csv_path)
    if args.json:
        audit.write_json(reports, args.json)
    for row in rows:
        print(", ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_measure(args) -> int:
    for path in args.paths:
        print(_size_line(Path(path)))
    return 0


def cmd_analyze(args) -> int:
    model = store.load(args.model)
    if isinstance(model, QuantizedModel):
        model = model.dequantized_model()
    hist = analysis.weight_histogram(model, args.layer, n_bins=args.bins, symmetric=args.symmetric)
    if args.out:
        analysis.write_histogram_csv(hist, args.out)
        print(f"wrote {args.out} ({len(hist.counts)} bins, {int(hist.counts.sum())} weights)")
    if args.sparsity is not None:
        stats = analysis.pruning_gap_stats(model, args.sparsity / 100.0)
        print(json.dumps(stats.as_dict(), sort_keys=True))
    return 0


# --- parser -------------------------------------------------------------------


def _train_flags(p, epochs: int | None):
    if epochs is not None:
        p.add_argument("--epochs", type=int, default=epochs, help="training epochs (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=64, help="mini-batch size (default: %(default)s)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default: %(default)s)")
    p.add_argument("--no-augment", action="store_true", help="disable flip/rotation augmentation")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="fraction of subjects held out for validation (default: %(default)s)")


def _data_flags(p, required: bool = True):
    p.add_argument("--manifest", required=required, help="manifest CSV (path,label,subject_id,attr:...)")
    p.add_argument("--image-root", help="directory image paths are relative to (default: the manifest's)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairsqueeze", description="Compress facial expression CNNs and audit per-group accuracy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic grouped image set")
    p.add_argument("--out", required=True, help="output directory (images/ and manifest.csv)")
    p.add_argument("--samples", type=int, default=2000, help="number of images (default: %(default)s)")
    p.add_argument("--classes", type=int, default=3, help="number of classes (default: %(default)s)")
    p.add_argument("--attribute", default="gender", help="name of the grouping attribute (default: %(default)s)")
    p.add_argument("--groups", type=parse_groups, default={"m": 0.5, "f": 0.5},
                   help="group proportions, e.g. m:0.7,f:0.3 (must sum to 1)")
    p.add_argument("--difficulty", type=parse_groups, help="extra noise std per group, e.g. f:0.15")
    p.add_argument("--attr", type=parse_attr, action="append",
                   help="additional attribute, e.g. race=a:0.5,b:0.3,c:0.2 (repeatable)")
    p.add_argument("--image-size", type=int, default=16, help="square image side in pixels (default: %(default)s)")
    p.add_argument("--channels", type=int, choices=(1, 3), default=1, help="1 = gray, 3 = RGB (default: %(default)s)")
    p.add_argument("--noise", type=float, default=0.2, help="base noise std (default: %(default)s)")
    p.add_argument("--per-subject", type=int, default=4, help="images per synthetic subject (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and save its best-validation weights")
    _data_flags(p)
    p.add_argument("--arch", default="ck48", help="ck48, raf100, or a JSON architecture file (default: %(default)s)")
    p.add_argument("--width", type=float, default=1.0, help="hidden width multiplier for ck48/raf100 (default: %(default)s)")
    p.add_argument("--channels", type=int, choices=(1, 3), help="raf100 input channels (default: 1)")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--log", help="per-epoch CSV log (default: <out>.log.csv)")
    p.add_argument("--label", default="baseline", help="row label used in reports (default: %(default)s)")
    _train_flags(p, epochs=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="prune, cluster and/or quantize a trained model, in the order given")
    p.add_argument("--model", required=True, help="input model file")
    _data_flags(p, required=False)
    p.add_argument("--prune", dest="steps", action=StepAction, type=percent, metavar="prune",
                   help="magnitude-prune to this integer percent sparsity")
    p.add_argument("--cluster", dest="steps", action=StepAction, type=int, metavar="cluster",
                   help="cluster each kernel into this many shared values (2..256)")
    p.add_argument("--quantize", dest="steps", action=StepAction, nargs=0, metavar="quantize",
                   help="int8 post-training quantization (must come last)")
    p.add_argument("--no-finetune", action="store_true", help="skip the fine-tuning after prune/cluster")
    p.add_argument("--finetune-epochs", type=int, default=2, help="fine-tuning epochs (default: %(default)s)")
    p.add_argument("--per-layer", action="store_true", help="rank magnitudes within each tensor instead of globally")
    p.add_argument("--init", choices=("linear", "kmeans++"), default="linear", help="centroid init (default: %(default)s)")
    p.add_argument("--scope", choices=("kernels", "all"), default="kernels",
                   help="cluster kernels only, or every parameter tensor (default: %(default)s)")
    p.add_argument("--out-dir", help="directory for stage outputs (default: next to --model)")
    p.add_argument("--prefix", help="output file stem (default: the input model's stem)")
    _train_flags(p, epochs=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("evaluate", help="overall accuracy of a model on a manifest")
    p.add_argument("--model", required=True)
    _data_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit", help="size, overall and per-group accuracy report for one or more models")
    p.add_argument("--models", nargs="+", required=True, help="model files, one report row each")
    _data_flags(p)
    p.add_argument("--attributes", help="comma-separated attributes (default: all in the manifest)")
    p.add_argument("--csv", required=True, help="output CSV")
    p.add_argument("--json", help="optional nested JSON report")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("measure-size", help="raw and DEFLATE-compressed size of model files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("analyze-weights", help="kernel weight histogram and pruning gap statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", required=True, help="layer name (e.g. dense) or tensor name (dense/kernel)")
    p.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS, help="histogram bins (default: %(default)s)")
    p.add_argument("--symmetric", action="store_true", help="bin over [-max|w|, max|w|]")
    p.add_argument("--out", help="histogram CSV (bin_left,bin_right,count)")
    p.add_argument("--sparsity", type=percent, help="also report pruning gap stats at this percent")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (FairsqueezeError, ValueError, KeyError, OSError) as exc:
        print(f"fairsqueeze {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
