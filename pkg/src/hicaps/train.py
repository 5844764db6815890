"""Optimization loop: Adam, decayed learning rate, level-weight schedules.

The per-level loss weights follow a coarse-to-fine curriculum: a step
schedule maps epoch -> lambda vector, so early epochs emphasize coarse
levels and later epochs the fine level.  Checkpoints are written for the
best fine-level test accuracy and for the final epoch; metrics go to a CSV
with one row per (epoch, level, split).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from .hierarchy import consistency_rate

CSV_FIELDS = (
    "epoch,level,split,accuracy,loss_margin,loss_recon,loss_total,lr,lambda"
)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; names the first bad tensor."""


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers per parameter plus the step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = lambda: {k: np.zeros_like(p.data) for k, p in params.items()}
    return AdamState(m=zeros(), v=zeros(), beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update in place; missing grads count as zero."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name in sorted(params):
        p = params[name]
        if p.data.shape != state.m[name].shape:
            raise T.ShapeError(
                f"adam_step: parameter {name} changed shape "
                f"{state.m[name].shape} -> {p.data.shape}"
            )
        g = p.grad if p.grad is not None else 0.0
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# schedules


def lr_at(epoch: int, initial_lr: float = 0.001, decay: float = 0.995) -> float:
    """Exponentially decayed rate applied from the start of each epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return initial_lr * decay**epoch


@dataclass(frozen=True)
class TrainSchedule:
    """Everything epoch-indexed about a run, plus the seed.

    ``lambda_schedule`` is a step function: ((start_epoch, weights), ...)
    with start epochs strictly increasing from 0.  "After k epochs" is
    encoded as start_epoch=k, i.e. the new weights apply from the start of
    0-indexed epoch k.
    """

    epochs: int
    lambda_schedule: tuple
    batch_size: int = 128
    initial_lr: float = 0.001
    lr_decay: float = 0.995
    mixup_alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lambda_schedule:
            raise ValueError("lambda_schedule must not be empty")
        starts = [int(e) for e, _ in self.lambda_schedule]
        if starts[0] != 0:
            raise ValueError(f"lambda_schedule must start at epoch 0, got {starts[0]}")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"lambda_schedule epochs must increase: {starts}")
        width = len(self.lambda_schedule[0][1])
        for e, lam in self.lambda_schedule:
            if len(lam) != width:
                raise ValueError(f"lambda vector at epoch {e} has length "
                                 f"{len(lam)} != {width}")
            if any(x < 0 for x in lam):
                raise ValueError(f"negative lambda at epoch {e}: {lam}")


def lambdas_at(epoch: int, schedule: TrainSchedule) -> tuple:
    """Lambda vector of the latest schedule entry with start <= epoch."""
    current = schedule.lambda_schedule[0][1]
    for start, lam in schedule.lambda_schedule:
        if start <= epoch:
            current = lam
        else:
            break
    return tuple(current)


LAMBDA_SCHEDULES = {
    "mnist": ((0, (0.90, 0.10)), (5, (0.10, 0.90)), (10, (0.02, 0.98))),
    "fashion_mnist": (
        (0, (0.98, 0.01, 0.01)),
        (5, (0.10, 0.70, 0.20)),
        (10, (0.07, 0.10, 0.83)),
        (15, (0.05, 0.05, 0.90)),
        (25, (0.01, 0.01, 0.98)),
    ),
    "cifar10": (
        (0, (0.90, 0.05, 0.05)),
        (5, (0.10, 0.70, 0.20)),
        (11, (0.07, 0.20, 0.73)),
        (17, (0.05, 0.15, 0.80)),
        (24, (0.05, 0.10, 0.85)),
    ),
    "cifar100": (
        (0, (0.90, 0.08, 0.02)),
        (7, (0.20, 0.70, 0.10)),
        (15, (0.15, 0.30, 0.55)),
        (22, (0.10, 0.15, 0.75)),
        (33, (0.05, 0.15, 0.80)),
    ),
}

DEFAULT_EPOCHS = {"mnist": 15, "fashion_mnist": 30, "cifar10": 30, "cifar100": 40}

# Mixup is used for the CIFAR runs only.
DEFAULT_MIXUP = {"mnist": None, "fashion_mnist": None, "cifar10": 0.2, "cifar100": 0.2}


def schedule_for(dataset: str, **overrides) -> TrainSchedule:
    """Default training schedule (curriculum, epochs, mixup) per dataset."""
    if dataset not in LAMBDA_SCHEDULES:
        raise ValueError(f"unknown dataset {dataset!r}")
    base = dict(
        epochs=DEFAULT_EPOCHS[dataset],
        lambda_schedule=LAMBDA_SCHEDULES[dataset],
        mixup_alpha=DEFAULT_MIXUP[dataset],
    )
    base.update(overrides)
    return TrainSchedule(**base)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    wall_time_s: float = 0.0
    best_fine_acc: float = 0.0
    best_epoch: int = -1

    def add(self, epoch, level, split, accuracy, loss_margin, loss_recon,
            loss_total, lr, lam):
        self.rows.append(
            {
                "epoch": epoch,
                "level": level,
                "split": split,
                "accuracy": accuracy,
                "loss_margin": loss_margin,
                "loss_recon": loss_recon,
                "loss_total": loss_total,
                "lr": lr,
                "lambda": lam,
            }
        )

    def last(self, level, split):
        for row in reversed(self.rows):
            if row["level"] == level and row["split"] == split:
                return row
        raise KeyError(f"no row for ({level}, {split})")

    def to_csv(self) -> str:
        lines = [CSV_FIELDS]
        for r in self.rows:
            lines.append(
                f"{r['epoch']},{r['level']},{r['split']},{r['accuracy']:.6f},"
                f"{r['loss_margin']:.6f},{r['loss_recon']:.6f},"
                f"{r['loss_total']:.6f},{r['lr']:.8f},{r['lambda']:.6f}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: M.HierarchicalCapsNet, dataset: D.Dataset,
             stats: D.NormalizationStats, lambdas, batch_size: int = 256):
    """Full-split metrics: per-level accuracy/margin, consistency, losses.

    Decoder masking uses per-level argmax (inference behaviour); margin
    losses are still measured against the true targets.
    """
    cfg = model.config
    n = len(dataset)
    correct = np.zeros(model.tree.num_levels)
    margin_sums = np.zeros(model.tree.num_levels)
    recon_sum = 0.0
    preds_all = []
    for batch in D.iter_batches(dataset, stats, batch_size):
        out = model.forward(batch.x_norm, mask_rows=None)
        b = batch.x_norm.shape[0]
        preds = out.predictions()
        preds_all.append(preds)
        correct += (preds == batch.labels).sum(axis=0)
        for lvl, (score, rows) in enumerate(zip(out.scores, batch.targets)):
            loss = M.margin_loss(score, rows, cfg.m_plus, cfg.m_minus, cfg.gamma)
            margin_sums[lvl] += float(loss.data) * b
        recon_sum += float(M.reconstruction_loss(batch.x_raw, out.reconstruction).data) * b
    preds_all = np.concatenate(preds_all, axis=0)
    margins = margin_sums / n
    recon = recon_sum / n
    total = cfg.tau * recon + (1 - cfg.tau) * float(
        np.dot(np.asarray(lambdas), margins)
    )
    return {
        "accuracy": correct / n,
        "margin": margins,
        "recon": recon,
        "total": total,
        "consistency": consistency_rate(preds_all, model.tree),
        "predictions": preds_all,
    }


# ---------------------------------------------------------------------------
# training


def train_run(config: M.ModelConfig, schedule: TrainSchedule,
              train_set: D.Dataset, test_set: D.Dataset, out_dir=None,
              verbose: bool = False):
    """Train a fresh model; returns (RunMetrics, model).

    Writes metrics.csv, run.json and best/final checkpoints under
    ``out_dir`` when given.  Two runs with the same schedule (seed included)
    produce byte-identical CSVs.
    """
    if len(schedule.lambda_schedule[0][1]) != train_set.tree.num_levels:
        raise ValueError(
            f"lambda vectors have {len(schedule.lambda_schedule[0][1])} entries "
            f"for a {train_set.tree.num_levels}-level hierarchy"
        )
    seeds = np.random.SeedSequence(schedule.seed).spawn(2)
    rng_init = np.random.default_rng(seeds[0])
    rng_data = np.random.default_rng(seeds[1])

    model = M.HierarchicalCapsNet(config, train_set.tree, rng_init)
    params = model.params()
    adam = adam_init(params)
    stats = D.compute_stats(train_set.images)
    level_names = train_set.tree.level_names
    fine = train_set.tree.num_levels - 1

    metrics = RunMetrics()
    started = time.time()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(schedule.epochs):
        lr = lr_at(epoch, schedule.initial_lr, schedule.lr_decay)
        lambdas = lambdas_at(epoch, schedule)
        correct = np.zeros(train_set.tree.num_levels)
        seen = 0
        margin_sums = np.zeros(train_set.tree.num_levels)
        recon_sum = 0.0
        total_sum = 0.0
        for step, batch in enumerate(
            D.iter_batches(
                train_set,
                stats,
                schedule.batch_size,
                rng=rng_data,
                mixup_alpha=schedule.mixup_alpha,
            )
        ):
            out = model.forward(batch.x_norm, mask_rows=batch.targets)
            level_losses = [
                M.margin_loss(s, rows, config.m_plus, config.m_minus, config.gamma)
                for s, rows in zip(out.scores, batch.targets)
            ]
            recon = M.reconstruction_loss(batch.x_raw, out.reconstruction)
            loss = M.total_loss(level_losses, recon, lambdas, config.tau)
            if not np.isfinite(loss.data):
                bad = T.first_nonfinite(loss)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}; first "
                    f"non-finite tensor: op={bad.op!r} shape={bad.shape}"
                )
            model.zero_grads()
            loss.backward()
            adam_step(params, adam, lr)

            b = batch.x_norm.shape[0]
            seen += b
            # train accuracy against the (dominant, under mixup) targets
            hard = np.stack([rows.argmax(axis=1) for rows in batch.targets], axis=1)
            correct += (out.predictions() == hard).sum(axis=0)
            for lvl, ll in enumerate(level_losses):
                margin_sums[lvl] += float(ll.data) * b
            recon_sum += float(recon.data) * b
            total_sum += float(loss.data) * b

        train_recon = recon_sum / seen
        train_total = total_sum / seen
        for lvl, name in enumerate(level_names):
            metrics.add(
                epoch, name, "train", correct[lvl] / seen, margin_sums[lvl] / seen,
                train_recon, train_total, lr, lambdas[lvl],
            )

        test = evaluate(model, test_set, stats, lambdas)
        for lvl, name in enumerate(level_names):
            metrics.add(
                epoch, name, "test", test["accuracy"][lvl], test["margin"][lvl],
                test["recon"], test["total"], lr, lambdas[lvl],
            )

        if test["accuracy"][fine] > metrics.best_fine_acc:
            metrics.best_fine_acc = float(test["accuracy"][fine])
            metrics.best_epoch = epoch
            if out_dir:
                M.save_checkpoint(os.path.join(out_dir, "checkpoint_best.mlcp"), model)
        if out_dir:
            metrics.write_csv(os.path.join(out_dir, "metrics.csv"))
        if verbose:
            accs = " ".join(
                f"{name}={test['accuracy'][lvl]:.4f}"
                for lvl, name in enumerate(level_names)
            )
            print(
                f"epoch {epoch:3d}  lr={lr:.6f}  lambdas={lambdas}  "
                f"test[{accs}]  consistency={test['consistency']:.4f}",
                flush=True,
            )

    metrics.wall_time_s = time.time() - started
    if out_dir:
        M.save_checkpoint(os.path.join(out_dir, "checkpoint_final.mlcp"), model)
        meta = {
            "dataset": train_set.name,
            "seed": schedule.seed,
            "fingerprint": M.fingerprint(config, train_set.tree),
            "config": json.loads(config.to_json()),
            "schedule": asdict(schedule),
            "wall_time_s": metrics.wall_time_s,
            "best_epoch": metrics.best_epoch,
            "best_fine_acc": metrics.best_fine_acc,
            "levels": list(level_names),
        }
        with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
    return metrics, model
