"""Command-line entry point: train, eval, reconstruct, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
All outputs land under the --out-dir / --out paths given on the command
line; reconstruction grids are written as portable pixmaps (PGM/PPM) and
plots as SVG.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as D
from . import model as M
from . import train as TR
from .hierarchy import HierarchyError, bundled_tree, load_tree
from .model import CheckpointError
from .tensor import ShapeError

DATASETS = ("mnist", "fashion_mnist", "cifar10", "cifar100")


class ValidationError(ValueError):
    """User-facing input problem; maps to exit code 2."""


def _resolve_tree(args):
    if getattr(args, "hierarchy_file", None):
        return load_tree(args.hierarchy_file)
    return bundled_tree(args.dataset)


def _config_overrides(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config file {path}: {e}")
    if not isinstance(blob, dict) or not set(blob) <= {"model", "schedule"}:
        raise ValidationError(
            f"{path}: config file must be a JSON object with keys "
            f"'model' and/or 'schedule'"
        )
    return blob.get("model", {}), blob.get("schedule", {})


def _resolve_config(args):
    model_over, sched_over = {}, {}
    if getattr(args, "config", None):
        model_over, sched_over = _config_overrides(args.config)
    try:
        config = M.config_for(args.dataset, args.profile, **model_over)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e))
    return config, sched_over


def _load_split(args, tree, split):
    try:
        return D.load_dataset(args.dataset, args.data_dir, split, tree)
    except D.DataError as e:
        raise ValidationError(str(e))


def cmd_train(args) -> int:
    tree = _resolve_tree(args)
    config, sched_over = _resolve_config(args)
    sched_over.setdefault("seed", args.seed)
    if args.epochs is not None:
        sched_over["epochs"] = args.epochs
    if args.batch_size is not None:
        sched_over["batch_size"] = args.batch_size
    if "lambda_schedule" in sched_over:
        sched_over["lambda_schedule"] = tuple(
            (int(e), tuple(lam)) for e, lam in sched_over["lambda_schedule"]
        )
    try:
        schedule = TR.schedule_for(args.dataset, **sched_over)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e))

    if args.print_config:
        print(
            json.dumps(
                {
                    "model": json.loads(config.to_json()),
                    "schedule": asdict_schedule(schedule),
                },
                indent=2,
                sort_keys=True,
            )
        )
        return 0

    train_set = _load_split(args, tree, "train")
    test_set = _load_split(args, tree, "test")
    if args.limit_train:
        train_set = train_set.subset(args.limit_train)
    if args.limit_test:
        test_set = test_set.subset(args.limit_test)

    print(
        f"training on {args.dataset}: {len(train_set)} train / "
        f"{len(test_set)} test, levels={tree.level_names}, "
        f"{M.HierarchicalCapsNet(config, tree).parameter_count():,} parameters"
    )
    metrics, model = TR.train_run(
        config, schedule, train_set, test_set, out_dir=args.out_dir, verbose=True
    )
    fine = tree.level_names[-1]
    last = metrics.last(fine, "test")
    print(
        f"done in {metrics.wall_time_s:.1f}s; final test fine accuracy "
        f"{100 * last['accuracy']:.2f}% (best {100 * metrics.best_fine_acc:.2f}% "
        f"at epoch {metrics.best_epoch}); outputs in {args.out_dir}"
    )
    return 0


def asdict_schedule(schedule: TR.TrainSchedule) -> dict:
    d = {
        "epochs": schedule.epochs,
        "batch_size": schedule.batch_size,
        "initial_lr": schedule.initial_lr,
        "lr_decay": schedule.lr_decay,
        "mixup_alpha": schedule.mixup_alpha,
        "seed": schedule.seed,
        "lambda_schedule": [[e, list(lam)] for e, lam in schedule.lambda_schedule],
    }
    return d


def _load_trained_model(args, tree):
    """Build the model per flags (or the checkpoint's run.json) and load weights."""
    if not os.path.exists(args.checkpoint):
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    sidecar = os.path.join(os.path.dirname(args.checkpoint) or ".", "run.json")
    if not args.config and args.profile == "default" and os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        config = M.ModelConfig.from_dict(meta["config"])
    else:
        config, _ = _resolve_config(args)
    model = M.HierarchicalCapsNet(config, tree)
    try:
        M.load_checkpoint(args.checkpoint, model)
    except CheckpointError as e:
        raise ValidationError(str(e))
    return model, config


def cmd_eval(args) -> int:
    tree = _resolve_tree(args)
    model, config = _load_trained_model(args, tree)
    train_set = _load_split(args, tree, "train")  # normalization stats source
    test_set = _load_split(args, tree, "test")
    if args.limit_test:
        test_set = test_set.subset(args.limit_test)
    stats = D.compute_stats(train_set.images)
    lambdas = TR.lambdas_at(10**9, TR.schedule_for(args.dataset))  # final weights
    result = TR.evaluate(model, test_set, stats, lambdas)

    names = tree.level_names
    header = " | ".join(f"{n:>8s}" for n in names)
    values = " | ".join(f"{100 * a:8.2f}" for a in result["accuracy"])
    print(f"accuracy (%) by level on {args.dataset} test split:")
    print(f"  {header}")
    print(f"  {values}")
    print(f"consistency rate: {result['consistency']:.4f}")

    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "eval.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("level,accuracy_pct\n")
        for n, a in zip(names, result["accuracy"]):
            fh.write(f"{n},{100 * a:.2f}\n")
        fh.write(f"consistency,{result['consistency']:.4f}\n")
    print(f"wrote {out_path}")
    return 0


def cmd_reconstruct(args) -> int:
    tree = _resolve_tree(args)
    model, config = _load_trained_model(args, tree)
    train_set = _load_split(args, tree, "train")
    test_set = _load_split(args, tree, "test")
    if args.n < 1:
        raise ValidationError(f"--n must be >= 1, got {args.n}")
    if args.n > len(test_set):
        raise ValidationError(
            f"requested {args.n} images but the test split has {len(test_set)}"
        )
    stats = D.compute_stats(train_set.images)
    raw = test_set.images[: args.n]
    out = model.forward(D.normalize(raw, stats), mask_rows=None)
    recon = np.clip(out.reconstruction.data, 0.0, 1.0)
    path = write_image_grid(args.out, [raw, recon])
    print(f"wrote {path} (top row: inputs, bottom row: reconstructions)")
    return 0


def write_image_grid(path, image_rows, gap: int = 2):
    """Write rows of [N,C,H,W] images in [0,1] as a binary PGM/PPM grid."""
    n = image_rows[0].shape[0]
    C, H, W = image_rows[0].shape[1:]
    for row in image_rows:
        if row.shape != (n, C, H, W):
            raise ShapeError(f"grid rows disagree: {row.shape} vs {(n, C, H, W)}")
    height = len(image_rows) * H + (len(image_rows) - 1) * gap
    width = n * W + (n - 1) * gap
    canvas = np.ones((height, width, C), dtype=np.float32)
    for r, row in enumerate(image_rows):
        for i in range(n):
            y, x = r * (H + gap), i * (W + gap)
            canvas[y : y + H, x : x + W] = row[i].transpose(1, 2, 0)
    pixels = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)

    root, ext = os.path.splitext(path)
    want = ".pgm" if C == 1 else ".ppm"
    if ext.lower() not in (".pgm", ".ppm"):
        path = root + want
    with open(path, "wb") as fh:
        tag = b"P5" if C == 1 else b"P6"
        fh.write(tag + f" {width} {height} 255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))
    return path


def cmd_plot(args) -> int:
    import csv

    try:
        with open(args.metrics_csv, "r", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(
                ("epoch", "level", "split", "accuracy")
            ) <= set(reader.fieldnames):
                raise ValidationError(
                    f"{args.metrics_csv}: missing expected metrics columns"
                )
            rows = list(reader)
    except OSError as e:
        raise ValidationError(str(e))
    except csv.Error as e:
        raise ValidationError(f"{args.metrics_csv}: malformed CSV: {e}")
    test_rows = [r for r in rows if r["split"] == "test"]
    if not test_rows:
        raise ValidationError(f"{args.metrics_csv}: no test-split rows to plot")

    curves = {}
    try:
        for r in test_rows:
            curves.setdefault(r["level"], []).append(
                (int(r["epoch"]), float(r["accuracy"]))
            )
    except ValueError as e:
        raise ValidationError(f"{args.metrics_csv}: malformed CSV: {e}")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for level, points in curves.items():
        points.sort()
        ax.plot(
            [p[0] for p in points],
            [p[1] for p in points],
            marker="o",
            markersize=3,
            label=level,
        )
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hicaps",
        description="hierarchical multi-label capsule classifier",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--dataset", choices=DATASETS, required=True)
        p.add_argument("--data-dir", default=os.environ.get("HICAPS_DATA", "data"))
        p.add_argument("--hierarchy-file", default=None,
                       help="override the bundled hierarchy file")
        p.add_argument("--profile", choices=M.PROFILES, default="default")
        p.add_argument("--config", default=None,
                       help="JSON file with 'model'/'schedule' overrides")

    p = sub.add_parser("train", help="train a model and write metrics/checkpoints")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--limit-train", type=int, default=None,
                   help="train on the first N images only")
    p.add_argument("--limit-test", type=int, default=None)
    p.add_argument("--out-dir", default="runs/latest")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved config as JSON and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-level accuracy + consistency of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--limit-test", type=int, default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="write an input/reconstruction image grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out", default="reconstruction.pgm")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("plot", help="accuracy-vs-epoch curves from a metrics CSV")
    p.add_argument("--metrics-csv", required=True)
    p.add_argument("--out", default="accuracy.svg")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, HierarchyError, D.DataError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TR.TrainingDiverged, ShapeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
