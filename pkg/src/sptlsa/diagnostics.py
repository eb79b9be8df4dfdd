"""Attention diagnostics: KL divergence from uniform, learned temperatures, class-attention maps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionRecord
from .autograd import DomainError
from .model import VisionTransformer


class NotApplicableError(ValueError):
    """The diagnostic does not apply to this model."""


def kld_from_uniform(row, tol: float = 1e-6) -> float:
    """KL(row || uniform over len(row)) = sum p log(p L), with 0 log 0 = 0."""
    p = np.asarray(row, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DomainError("expected a non-empty probability vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise DomainError(f"not a distribution: min {p.min()}, sum {p.sum()}")
    nz = p > 0
    return float(max(np.sum(p[nz] * np.log(p[nz] * p.size)), 0.0))


def _row_klds(scores: np.ndarray, masked: bool) -> np.ndarray:
    """Per-row KL from uniform for ``[..., L, L]`` scores.

    For masked scores the diagonal is dropped and the reference is uniform over
    the remaining L - 1 entries.
    """
    length = scores.shape[-1]
    if masked:
        off = ~np.eye(length, dtype=bool)
        p = scores[..., off].reshape(scores.shape[:-2] + (length, length - 1))
        support = length - 1
    else:
        p = scores
        support = length
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p * support), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def layer_klds(records: list[AttentionRecord], masked: list[bool]) -> np.ndarray:
    """Mean KL over batch, heads and rows for each recorded layer."""
    return np.array([_row_klds(r.scores, m).mean() for r, m in zip(records, masked)])


def depth_kld_profile(model: VisionTransformer, images, exclude_masked_diagonal: bool = True,
                      batch_size: int = 128) -> np.ndarray:
    """Per-layer mean KL divergence of attention rows from uniform.

    With ``exclude_masked_diagonal`` (the default) masked layers are compared to
    the uniform distribution over their L - 1 feasible entries; otherwise all
    layers use L.
    """
    images = np.asarray(images, dtype=np.float64)
    masked = [a.mask_diagonal and exclude_masked_diagonal for a in model.attention_params()]
    totals = np.zeros(len(model.blocks))
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        _, records = model.forward(chunk, capture_attention=True)
        totals += layer_klds(records, masked) * len(chunk)
    return totals / len(images)


@dataclass
class TemperatureProfile:
    mean_tau: np.ndarray
    reference: np.ndarray  # sqrt(d_k) per layer
    learnable: bool = True

    @property
    def ratio(self) -> np.ndarray:
        return self.mean_tau / self.reference


def temperature_profile(model: VisionTransformer) -> TemperatureProfile:
    """Head-averaged learned temperature per layer, next to sqrt(d_k)."""
    attns = list(model.attention_params())
    if not any(a.learnable_temperature for a in attns):
        raise NotApplicableError("model has no learnable softmax temperature")
    return TemperatureProfile(np.array([a.temperatures().mean() for a in attns]),
                              np.array([math.sqrt(a.d_k) for a in attns]))


def fixed_temperature_profile(model: VisionTransformer) -> TemperatureProfile:
    """Temperatures actually used by each layer, learnable or not."""
    attns = list(model.attention_params())
    return TemperatureProfile(np.array([a.temperatures().mean() for a in attns]),
                              np.array([math.sqrt(a.d_k) for a in attns]),
                              learnable=any(a.learnable_temperature for a in attns))


@dataclass
class DiagnosticsReport:
    kld: np.ndarray
    temperature: TemperatureProfile
    class_attention: dict[int, np.ndarray] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"layer": i, "mean_kld": float(self.kld[i]), "mean_tau": float(self.temperature.mean_tau[i]),
                 "sqrt_dk": float(self.temperature.reference[i]),
                 "tau_ratio": float(self.temperature.ratio[i]),
                 "learnable": int(self.temperature.learnable)}
                for i in range(len(self.kld))]


def diagnose(model: VisionTransformer, images, exclude_masked_diagonal: bool = True) -> DiagnosticsReport:
    kld = depth_kld_profile(model, images, exclude_masked_diagonal)
    if len(kld) != len(model.blocks) or np.any(kld < 0):
        raise AssertionError("KL profile must have one non-negative value per layer")
    return DiagnosticsReport(kld, fixed_temperature_profile(model))


# ---------------------------------------------------------- class attention

def class_attention_grid(record: AttentionRecord, batch_index: int = 0) -> np.ndarray:
    """Head-averaged class-token attention over visual tokens, renormalized, as a square grid."""
    scores = record.scores[batch_index].mean(axis=0)  # [L, L]
    row = scores[0, 1:]
    total = row.sum()
    if total <= 0:
        raise DomainError("class token puts no attention on visual tokens")
    row = row / total
    side = math.isqrt(row.size)
    if side * side != row.size:
        raise NotApplicableError(f"{row.size} visual tokens do not form a square grid")
    return row.reshape(side, side)


def export_class_attention(model: VisionTransformer, image, layer: int = -1) -> np.ndarray:
    if not model.config.use_class_token:
        raise NotApplicableError("model has no class token")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    _, records = model.forward(image[:1], capture_attention=True)
    return class_attention_grid(records[layer])


def to_pgm_bytes(grid: np.ndarray) -> bytes:
    """Binary (P5) 8-bit PGM, min-max scaled; a constant grid maps to all zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    scaled = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_attention_map(grid: np.ndarray, out_prefix) -> tuple[Path, Path]:
    out_prefix = Path(out_prefix)
    csv_path = out_prefix.with_suffix(".csv")
    pgm_path = out_prefix.with_suffix(".pgm")
    np.savetxt(csv_path, grid, delimiter=",", fmt="%.17g")
    pgm_path.write_bytes(to_pgm_bytes(grid))
    return csv_path, pgm_path
