"""Seeded training and evaluation loops."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import NumericalError
from .checkpoint import save_checkpoint
from .model import ConfigError, VisionTransformer
from .optim import OptimizerState, adamw_step, lr_at

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "lr", "train_loss", "eval_top1"]


class TrainingDiverged(NumericalError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    base_lr: float = 1e-3
    warmup_epochs: int = 2
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    seed: int = 0
    subset_size: int | None = None
    eval_every: int = 1  # epochs
    subset_seed: int | None = None  # defaults to ``seed``

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if not 0.0 <= self.label_smoothing <= 0.3:
            raise ConfigError(f"label smoothing must lie in [0, 0.3], got {self.label_smoothing}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    model: VisionTransformer
    metrics: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    subset_indices: np.ndarray | None = None


def subset_indices(n: int, size: int | None, seed: int) -> np.ndarray:
    """First ``size`` indices of a seeded permutation (all indices if ``size`` is None)."""
    if size is None or size >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, 1]).permutation(n)[:size])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def evaluate(model: VisionTransformer, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    logits = model.predict_logits(dataset.images(), batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in METRICS_HEADER})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return [{"step": int(r["step"]), "epoch": int(r["epoch"]), "lr": float(r["lr"]),
                 "train_loss": float(r["train_loss"]),
                 "eval_top1": float(r["eval_top1"]) if r["eval_top1"] else None} for r in reader]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def train(model: VisionTransformer, dataset, cfg: TrainConfig, eval_dataset=None,
          out_dir=None) -> TrainResult:
    """Train ``model`` in place with AdamW, warmup-cosine lr and label smoothing.

    ``dataset`` needs ``len()``, ``labels`` and ``images(index)`` returning
    normalized float images.  With ``out_dir`` a checkpoint is refreshed at every
    evaluation point and ``metrics.csv`` is written at the end; on divergence the
    last good checkpoint is left in place.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    chosen = subset_indices(len(dataset), cfg.subset_size,
                            cfg.seed if cfg.subset_seed is None else cfg.subset_seed)
    n = len(chosen)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    params = model.parameters()
    state = OptimizerState()
    result = TrainResult(model, subset_indices=chosen)
    step = 0
    for epoch in range(cfg.epochs):
        order = chosen[epoch_order(n, cfg.seed, epoch)]
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lr = lr_at(step, total, warmup, cfg.base_lr)
            model.zero_grad()
            logits, _ = model.forward(dataset.images(idx))
            loss = ag.cross_entropy(logits, dataset.labels[idx], cfg.label_smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step}")
            loss.backward()
            adamw_step(params, state, lr, cfg.weight_decay)
            epoch_losses.append(value)
            result.step_losses.append(value)
            step += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            top1 = evaluate(model, eval_dataset) if eval_dataset is not None else None
            row = {"step": step, "epoch": epoch + 1, "lr": lr,
                   "train_loss": float(np.mean(epoch_losses)), "eval_top1": top1}
            result.metrics.append(row)
            log.info("epoch %d step %d loss %.4f top1 %s", epoch + 1, step, row["train_loss"], top1)
            if out is not None:
                save_checkpoint(out / "checkpoint.bin", model, step)
    if out is not None:
        write_metrics(out / "metrics.csv", result.metrics)
    return result
