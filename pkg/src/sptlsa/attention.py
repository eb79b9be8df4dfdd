"""Multi-head self-attention with optional diagonal masking and learnable temperature.

Standard attention divides the query-key similarities by sqrt(d_k).  Locality
self-attention (LSA) instead divides by a per-head temperature and can mask
each token's similarity with itself before the softmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import MASK_VALUE, Parameter, ShapeError, Tensor

TEMPERATURE_FLOOR = 1e-3


@dataclass
class AttentionParams:
    """Projections and temperature of one attention layer.

    ``tau`` is a Parameter of shape ``[heads]`` when learnable, otherwise a
    float used for every head.
    """

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    out_proj: Parameter
    heads: int
    tau: Parameter | float
    mask_diagonal: bool = False

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.w_q.shape != self.w_k.shape:
            raise ShapeError(f"query {self.w_q.shape} and key {self.w_k.shape} projections differ")
        if self.w_q.shape[1] % self.heads or self.w_v.shape[1] % self.heads:
            raise ValueError(f"projection widths not divisible by {self.heads} heads")
        if self.out_proj.shape != (self.w_v.shape[1], d):
            raise ShapeError(f"out_proj {self.out_proj.shape} != ({self.w_v.shape[1]}, {d})")

    @property
    def d_k(self) -> int:
        return self.w_k.shape[1] // self.heads

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1] // self.heads

    @property
    def learnable_temperature(self) -> bool:
        return isinstance(self.tau, Parameter)

    @property
    def is_standard(self) -> bool:
        return (not self.mask_diagonal and not self.learnable_temperature
                and float(self.tau) == math.sqrt(self.d_k))

    def temperatures(self) -> np.ndarray:
        if self.learnable_temperature:
            return self.tau.data.copy()
        return np.full(self.heads, float(self.tau))

    def parameters(self) -> list[Parameter]:
        params = [self.w_q, self.w_k, self.w_v, self.out_proj]
        if self.learnable_temperature:
            params.append(self.tau)
        return params


@dataclass
class AttentionRecord:
    layer: int
    scores: np.ndarray  # [B, h, L, L], post-softmax


@dataclass
class AttentionCollector:
    """Receives one record per attention layer during a forward pass."""

    records: list[AttentionRecord] = field(default_factory=list)

    def add(self, layer: int, scores: np.ndarray) -> None:
        self.records.append(AttentionRecord(layer, scores.copy()))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, length, width = t.shape
    return ag.transpose(ag.reshape(t, (b, length, heads, width // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, length, dv = t.shape
    return ag.reshape(ag.transpose(t, (0, 2, 1, 3)), (b, length, h * dv))


def similarity(x: Tensor, params: AttentionParams) -> Tensor:
    """Per-head query-key dot products ``[B, h, L, L]``."""
    x = ag.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != params.w_q.shape[0]:
        raise ShapeError(f"tokens {x.shape} do not match hidden dim {params.w_q.shape[0]}")
    q = _split_heads(ag.matmul(x, params.w_q), params.heads)
    k = _split_heads(ag.matmul(x, params.w_k), params.heads)
    return ag.matmul(q, ag.swapaxes(k, -1, -2))


def diagonal_mask(r: Tensor) -> Tensor:
    """Set every (i, i) entry to the masking value; no gradient reaches them."""
    r = ag.as_tensor(r)
    if r.ndim < 2 or r.shape[-1] != r.shape[-2]:
        raise ShapeError(f"diagonal masking needs square trailing dims, got {r.shape}")
    return ag.masked_fill(r, np.eye(r.shape[-1], dtype=bool), MASK_VALUE)


def _temperature_tensor(params: AttentionParams):
    if params.learnable_temperature:
        return ag.reshape(params.tau, (params.heads, 1, 1))
    return float(params.tau)


def _attend(x: Tensor, scores: Tensor, params: AttentionParams) -> Tensor:
    v = _split_heads(ag.matmul(x, params.w_v), params.heads)
    return ag.matmul(_merge_heads(ag.matmul(scores, v)), params.out_proj)


def standard_self_attention(x: Tensor, params: AttentionParams,
                            collector: AttentionCollector | None = None, layer: int = 0) -> Tensor:
    """softmax(R / sqrt(d_k)) V, heads concatenated and projected."""
    r = similarity(x, params)
    scores = ag.tempered_softmax(r / math.sqrt(params.d_k), 1.0)
    if collector is not None:
        collector.add(layer, scores.data)
    return _attend(x, scores, params)


def locality_self_attention(x: Tensor, params: AttentionParams,
                            collector: AttentionCollector | None = None, layer: int = 0
                            ) -> tuple[Tensor, AttentionRecord | None]:
    """softmax(mask(R) / tau) V with masking and temperature as configured."""
    r = similarity(x, params)
    if params.mask_diagonal:
        r = diagonal_mask(r)
    scores = ag.tempered_softmax(r, _temperature_tensor(params))
    record = None
    if collector is not None:
        collector.add(layer, scores.data)
        record = collector.records[-1]
    return _attend(x, scores, params), record


def multi_head(x: Tensor, params: AttentionParams,
               collector: AttentionCollector | None = None, layer: int = 0) -> Tensor:
    if params.is_standard:
        return standard_self_attention(x, params, collector, layer)
    out, _ = locality_self_attention(x, params, collector, layer)
    return out


def single_head(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, temperature,
                mask_diagonal: bool = False) -> Tensor:
    """One head written directly from the formula, without head bookkeeping."""
    r = ag.matmul(ag.matmul(x, w_q), ag.swapaxes(ag.matmul(x, w_k), -1, -2))
    if mask_diagonal:
        r = diagonal_mask(r)
    return ag.matmul(ag.tempered_softmax(r, temperature), ag.matmul(x, w_v))


def clamp_temperature(params: AttentionParams, floor: float = TEMPERATURE_FLOOR) -> int:
    """Raise any temperature below ``floor`` back to it; returns how many were clamped."""
    if not params.learnable_temperature:
        return 0
    low = params.tau.data < floor
    count = int(np.count_nonzero(low))
    if count:
        params.tau.data[low] = floor
        params.tau.clamp_events += count
    return count


def row_entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy of each distribution along the last axis (0 log 0 = 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)
