"""Run manifests and the experiment drivers behind the CLI."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autograd as ag
from .checkpoint import canonical_json
from .model import VARIANT_FLAGS, ConfigError, ViTConfig, build_model, variant_config
from .tokenization import PRESETS, ShiftStrategy
from .training import TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)

TEMPERATURE_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)
SHIFT_RATIOS = (0.125, 0.25, 0.5, 0.75, 1.0)
SHIFT_PRESETS = ("cardinal4", "diagonal4", "cardinal8")


@dataclass
class RunManifest:
    """Everything needed to reproduce a run, serialized as canonical JSON."""

    model: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: dict = field(default_factory=dict)
    code_version: str = __version__
    threads: int = 1

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "dataset": dict(self.dataset),
                "code_version": self.code_version, "threads": self.threads}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("ascii")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        if not isinstance(d, dict):
            raise ConfigError("manifest must be a JSON object")
        unknown = set(d) - {"model", "train", "dataset", "code_version", "threads", "variant"}
        if unknown:
            raise ConfigError(f"unknown manifest keys {sorted(unknown)}")
        try:
            return cls._from_dict(d)
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid manifest: {exc}") from exc

    @classmethod
    def _from_dict(cls, d: dict) -> "RunManifest":
        model = ViTConfig.from_dict(d.get("model", {}))
        if "variant" in d:
            model = variant_config(model, d["variant"])
        return cls(model=model, train=TrainConfig.from_dict(d.get("train", {})),
                   dataset=dict(d.get("dataset", {})), code_version=d.get("code_version", __version__),
                   threads=int(d.get("threads", 1)))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def write_csv(path, header: Sequence[str], rows: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(header), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def run(manifest: RunManifest, train_data, eval_data=None, out_dir=None) -> TrainResult:
    model = build_model(manifest.model, manifest.train.seed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "manifest.json").write_text(manifest.to_json())
    return train(model, train_data, manifest.train, eval_data, out_dir)


def _train_and_score(config: ViTConfig, train_cfg: TrainConfig, train_data, eval_data) -> tuple[float, TrainResult]:
    result = train(build_model(config, train_cfg.seed), train_data, train_cfg)
    return evaluate(result.model, eval_data), result


def ablate(base: ViTConfig, train_cfg: TrainConfig, train_data, eval_data, seeds: Sequence[int],
           variants: Sequence[str] = tuple(VARIANT_FLAGS), keep_models: bool = False):
    """Train each named variant under identical pipelines; one row per variant.

    Returns ``(rows, models)`` where ``models[(name, seed)]`` holds trained
    models when ``keep_models`` is set.
    """
    rows, models = [], {}
    for name in variants:
        config = variant_config(base, name)
        row = {"model": name}
        scores = []
        for seed in seeds:
            cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": int(seed)})
            top1, result = _train_and_score(config, cfg, train_data, eval_data)
            log.info("%s seed %d: top1 %.4f", name, seed, top1)
            row[f"top1_seed{seed}"] = top1
            scores.append(top1)
            if keep_models:
                models[(name, int(seed))] = result.model
        row["mean_top1"] = float(np.mean(scores))
        rows.append(row)
    return rows, models


def ablation_header(seeds: Sequence[int]) -> list[str]:
    return ["model", "mean_top1"] + [f"top1_seed{s}" for s in seeds]


def temperature_sweep(base: ViTConfig, train_cfg: TrainConfig, train_data, eval_data,
                      multipliers: Sequence[float] = TEMPERATURE_MULTIPLIERS,
                      seeds: Sequence[int] = (0,)) -> list[dict]:
    """Fixed softmax temperature = multiplier * sqrt(d_k), one row per multiplier."""
    rows = []
    d_k = base.hidden_dim // base.heads
    for m in multipliers:
        config = base.replace(use_lsa_temperature=False, temperature_multiplier=float(m))
        row = {"multiplier": float(m), "temperature": float(m * np.sqrt(d_k))}
        scores = []
        for seed in seeds:
            cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": int(seed)})
            top1, _ = _train_and_score(config, cfg, train_data, eval_data)
            row[f"top1_seed{seed}"] = top1
            scores.append(top1)
        row["mean_top1"] = float(np.mean(scores))
        rows.append(row)
    return rows


def temperature_header(seeds: Sequence[int]) -> list[str]:
    return ["multiplier", "temperature", "mean_top1"] + [f"top1_seed{s}" for s in seeds]


def shift_sweep(base: ViTConfig, train_cfg: TrainConfig, train_data, eval_data,
                presets: Sequence[str] = SHIFT_PRESETS, ratios: Sequence[float] = (0.5,)) -> list[dict]:
    """SPT over shift direction sets and shift ratios."""
    rows = []
    for preset in presets:
        for ratio in ratios:
            strategy = ShiftStrategy(PRESETS[preset], float(ratio))
            config = base.replace(use_spt=True, shift=strategy)
            top1, _ = _train_and_score(config, train_cfg, train_data, eval_data)
            rows.append({"directions": preset, "shift_ratio": float(ratio),
                         "shift_px": strategy.shift_px(base.patch_size), "top1": top1})
    return rows


SHIFT_HEADER = ["directions", "shift_ratio", "shift_px", "top1"]


def gradcheck_model(config: ViTConfig, seed: int = 0, batch: int = 2, max_coords: int | None = 12,
                    eps: float = 1e-5, smoothing: float = 0.1) -> float:
    """Worst relative gradient error of the freshly initialised model's loss on random inputs.

    ``max_coords`` coordinates are sampled from every parameter tensor.
    """
    rng = np.random.default_rng([seed, 7])
    model = build_model(config, seed)
    images = rng.normal(size=(batch, config.image_height, config.image_width, config.channels))
    labels = rng.integers(0, config.num_classes, size=batch)

    def loss():
        logits, _ = model.forward(images)
        return ag.cross_entropy(logits, labels, smoothing)

    return ag.finite_diff_check(loss, model.parameters(), eps=eps, max_coords=max_coords, rng=rng)
