"""Vision transformer assembly for the baseline and every SPT/LSA variant."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .attention import (TEMPERATURE_FLOOR, AttentionCollector, AttentionParams, AttentionRecord,
                        multi_head)
from .autograd import Parameter, ShapeError, Tensor
from .tokenization import (EmbeddingParams, ShiftStrategy, TokenBatch, patch_embedding,
                           patch_vector_length, spt_pooling)

VARIANT_FLAGS = {
    "ViT": dict(use_spt=False, use_lsa_temperature=False, use_lsa_masking=False),
    "T-ViT": dict(use_spt=False, use_lsa_temperature=True, use_lsa_masking=False),
    "M-ViT": dict(use_spt=False, use_lsa_temperature=False, use_lsa_masking=True),
    "L-ViT": dict(use_spt=False, use_lsa_temperature=True, use_lsa_masking=True),
    "S-ViT": dict(use_spt=True, use_lsa_temperature=False, use_lsa_masking=False),
    "SL-ViT": dict(use_spt=True, use_lsa_temperature=True, use_lsa_masking=True),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoolingStage:
    layer: int       # pooling runs right before this encoder block
    pool_size: int
    dim: int         # hidden dim of the following stage


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 4
    hidden_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    patch_size: int = 8
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    num_classes: int = 10
    use_spt: bool = False
    use_lsa_temperature: bool = False
    use_lsa_masking: bool = False
    use_class_token: bool = True
    pooling_stages: tuple[PoolingStage, ...] = ()
    shift: ShiftStrategy = field(default_factory=ShiftStrategy)
    temperature_multiplier: float = 1.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        stages = tuple(s if isinstance(s, PoolingStage) else PoolingStage(*s) for s in self.pooling_stages)
        object.__setattr__(self, "pooling_stages", stages)
        if isinstance(self.shift, dict):
            object.__setattr__(self, "shift", ShiftStrategy.from_dict(self.shift))

    @property
    def num_tokens(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def variant_name(self) -> str | None:
        flags = dict(use_spt=self.use_spt, use_lsa_temperature=self.use_lsa_temperature,
                     use_lsa_masking=self.use_lsa_masking)
        for name, f in VARIANT_FLAGS.items():
            if f == flags:
                return name
        return None

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.heads} heads")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(f"{self.image_height}x{self.image_width} not divisible by patch size {self.patch_size}")
        if self.num_classes < 1 or self.mlp_ratio <= 0 or self.temperature_multiplier <= 0:
            raise ConfigError("num_classes, mlp_ratio and temperature_multiplier must be positive")
        if self.use_spt:
            self.shift.shift_px(self.patch_size)
        layers = [s.layer for s in self.pooling_stages]
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError(f"pooling layers must be strictly increasing, got {layers}")
        if any(not 0 <= l < self.depth for l in layers):
            raise ConfigError(f"pooling layers must lie in [0, {self.depth}), got {layers}")
        gh, gw = self.image_height // self.patch_size, self.image_width // self.patch_size
        for stage in self.pooling_stages:
            if gh != gw:
                raise ConfigError("pooling needs a square token grid")
            if gh % stage.pool_size:
                raise ConfigError(f"pool size {stage.pool_size} does not divide token grid side {gh}")
            if stage.dim % self.heads:
                raise ConfigError(f"pooled dim {stage.dim} not divisible by {self.heads} heads")
            if self.use_spt:
                self.shift.shift_px(stage.pool_size)
            gh = gw = gh // stage.pool_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shift"] = self.shift.to_dict()
        d["pooling_stages"] = [list(dataclasses.astuple(s)) for s in self.pooling_stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        d = dict(d)
        if "shift" in d:
            d["shift"] = ShiftStrategy.from_dict(d["shift"])
        if "pooling_stages" in d:
            d["pooling_stages"] = tuple(PoolingStage(*s) for s in d["pooling_stages"])
        return cls(**d)

    def replace(self, **changes) -> "ViTConfig":
        return dataclasses.replace(self, **changes)


def variant_config(base: ViTConfig, name: str) -> ViTConfig:
    try:
        return base.replace(**VARIANT_FLAGS[name])
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {list(VARIANT_FLAGS)}") from None


def variant_suite(base: ViTConfig) -> list[tuple[str, ViTConfig]]:
    """ViT, T-ViT, M-ViT, L-ViT, S-ViT and SL-ViT built from ``base``."""
    return [(name, variant_config(base, name)) for name in VARIANT_FLAGS]


# ------------------------------------------------------------------ blocks

@dataclass
class EncoderBlock:
    ln1_gain: Parameter
    ln1_bias: Parameter
    attn: AttentionParams
    ln2_gain: Parameter
    ln2_bias: Parameter
    fc1_w: Parameter
    fc1_b: Parameter
    fc2_w: Parameter
    fc2_b: Parameter
    ln_eps: float = 1e-6

    def parameters(self) -> list[Parameter]:
        return [self.ln1_gain, self.ln1_bias, *self.attn.parameters(), self.ln2_gain, self.ln2_bias,
                self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def __call__(self, x: Tensor, collector: AttentionCollector | None = None, layer: int = 0) -> Tensor:
        h = ag.layer_norm(x, self.ln1_gain, self.ln1_bias, self.ln_eps)
        x = ag.add(x, multi_head(h, self.attn, collector, layer))
        h = ag.layer_norm(x, self.ln2_gain, self.ln2_bias, self.ln_eps)
        h = ag.gelu(ag.add(ag.matmul(h, self.fc1_w), self.fc1_b))
        return ag.add(x, ag.add(ag.matmul(h, self.fc2_w), self.fc2_b))


class _Init:
    """Deterministic parameter factory; call order fixes the random stream."""

    def __init__(self, seed: int, std: float = 0.02):
        self.rng = np.random.default_rng(seed)
        self.std = std
        self.names: list[str] = []

    def _register(self, name: str):
        if name in self.names:
            raise ConfigError(f"duplicate parameter name {name}")
        self.names.append(name)

    def normal(self, name: str, shape) -> Parameter:
        self._register(name)
        # truncated at two standard deviations
        values = self.rng.standard_normal(shape)
        bad = np.abs(values) > 2.0
        while bad.any():
            values[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(values) > 2.0
        return Parameter(values * self.std, name)

    def const(self, name: str, shape, value: float, lower_bound: float | None = None) -> Parameter:
        self._register(name)
        return Parameter(np.full(shape, value, dtype=np.float64), name, lower_bound)


class VisionTransformer:
    """A built model: parameters plus the forward plan described by its config."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        init = _Init(seed)
        cfg = config
        d = cfg.hidden_dim
        strategy = cfg.shift if cfg.use_spt else None

        flat = patch_vector_length(cfg.patch_size, cfg.channels, strategy)
        length = cfg.num_tokens + int(cfg.use_class_token)
        self.embedding = EmbeddingParams(
            proj=init.normal("embed.proj", (flat, d)),
            ln_gain=init.const("embed.ln.gain", flat, 1.0) if cfg.use_spt else None,
            ln_bias=init.const("embed.ln.bias", flat, 0.0) if cfg.use_spt else None,
            cls_token=init.const("embed.cls_token", d, 0.0) if cfg.use_class_token else None,
            pos_embedding=init.normal("embed.pos", (length, d)),
        )

        self.pools: dict[int, tuple[PoolingStage, EmbeddingParams]] = {}
        self.blocks: list[EncoderBlock] = []
        stages = {s.layer: s for s in cfg.pooling_stages}
        for i in range(cfg.depth):
            if i in stages:
                stage = stages[i]
                flat = patch_vector_length(stage.pool_size, d, strategy)
                self.pools[i] = (stage, EmbeddingParams(
                    proj=init.normal(f"pool{i}.proj", (flat, stage.dim)),
                    ln_gain=init.const(f"pool{i}.ln.gain", flat, 1.0) if cfg.use_spt else None,
                    ln_bias=init.const(f"pool{i}.ln.bias", flat, 0.0) if cfg.use_spt else None,
                    cls_proj=init.normal(f"pool{i}.cls_proj", (d, stage.dim)) if cfg.use_class_token else None,
                ))
                d = stage.dim
            self.blocks.append(self._make_block(init, f"blocks.{i}", d))

        self.final_ln_gain = init.const("norm.gain", d, 1.0)
        self.final_ln_bias = init.const("norm.bias", d, 0.0)
        self.head_w = init.normal("head.weight", (d, cfg.num_classes))
        self.head_b = init.const("head.bias", cfg.num_classes, 0.0)

    def _make_block(self, init: _Init, prefix: str, d: int) -> EncoderBlock:
        cfg = self.config
        hidden = int(round(cfg.mlp_ratio * d))
        d_k = d // cfg.heads
        tau_value = cfg.temperature_multiplier * math.sqrt(d_k)
        if cfg.use_lsa_temperature:
            tau = init.const(f"{prefix}.attn.tau", cfg.heads, tau_value, lower_bound=TEMPERATURE_FLOOR)
        else:
            tau = tau_value
        attn = AttentionParams(
            w_q=init.normal(f"{prefix}.attn.q", (d, d)),
            w_k=init.normal(f"{prefix}.attn.k", (d, d)),
            w_v=init.normal(f"{prefix}.attn.v", (d, d)),
            out_proj=init.normal(f"{prefix}.attn.out", (d, d)),
            heads=cfg.heads,
            tau=tau,
            mask_diagonal=cfg.use_lsa_masking,
        )
        return EncoderBlock(
            ln1_gain=init.const(f"{prefix}.ln1.gain", d, 1.0),
            ln1_bias=init.const(f"{prefix}.ln1.bias", d, 0.0),
            attn=attn,
            ln2_gain=init.const(f"{prefix}.ln2.gain", d, 1.0),
            ln2_bias=init.const(f"{prefix}.ln2.bias", d, 0.0),
            fc1_w=init.normal(f"{prefix}.mlp.fc1.weight", (d, hidden)),
            fc1_b=init.const(f"{prefix}.mlp.fc1.bias", hidden, 0.0),
            fc2_w=init.normal(f"{prefix}.mlp.fc2.weight", (hidden, d)),
            fc2_b=init.const(f"{prefix}.mlp.fc2.bias", d, 0.0),
            ln_eps=cfg.ln_eps,
        )

    # ------------------------------------------------------------ access

    def parameters(self) -> list[Parameter]:
        params = self.embedding.parameters()
        for i, block in enumerate(self.blocks):
            if i in self.pools:
                params += self.pools[i][1].parameters()
            params += block.parameters()
        params += [self.final_ln_gain, self.final_ln_bias, self.head_w, self.head_b]
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def attention_params(self) -> Iterator[AttentionParams]:
        for block in self.blocks:
            yield block.attn

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(state) != set(named):
            missing, extra = set(named) - set(state), set(state) - set(named)
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            if named[name].shape != np.shape(value):
                raise ShapeError(f"{name}: expected {named[name].shape}, got {np.shape(value)}")
            named[name].data = np.array(value, dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    # ----------------------------------------------------------- forward

    def embed(self, images) -> TokenBatch:
        cfg = self.config
        x = ag.as_tensor(images)
        expected = (cfg.image_height, cfg.image_width, cfg.channels)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"images {x.shape} do not match configured [B, {expected[0]}, {expected[1]}, {expected[2]}]")
        return patch_embedding(x, cfg.patch_size, self.embedding, cfg.shift if cfg.use_spt else None)

    def encode(self, batch: TokenBatch, collector: AttentionCollector | None = None) -> TokenBatch:
        strategy = self.config.shift if self.config.use_spt else None
        for i, block in enumerate(self.blocks):
            if i in self.pools:
                stage, params = self.pools[i]
                batch = spt_pooling(batch, stage.pool_size, params, strategy)
            batch = TokenBatch(block(batch.tokens, collector, i), batch.has_class_token)
        return batch

    def features(self, images, collector: AttentionCollector | None = None) -> Tensor:
        batch = self.encode(self.embed(images), collector)
        tokens = ag.layer_norm(batch.tokens, self.final_ln_gain, self.final_ln_bias, self.config.ln_eps)
        if batch.has_class_token:
            return tokens[:, 0, :]
        return ag.mean(tokens, axis=1)

    def forward(self, images, capture_attention: bool = False
                ) -> tuple[Tensor, list[AttentionRecord] | None]:
        collector = AttentionCollector() if capture_attention else None
        logits = ag.add(ag.matmul(self.features(images, collector), self.head_w), self.head_b)
        return logits, (collector.records if collector is not None else None)

    __call__ = forward

    def predict_logits(self, images, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = [self.forward(images[i:i + batch_size])[0].data for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes))


def build_model(config: ViTConfig, seed: int = 0) -> VisionTransformer:
    """Deterministically initialised model for ``config``."""
    return VisionTransformer(config, seed)
