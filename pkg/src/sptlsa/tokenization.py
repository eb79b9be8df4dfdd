"""Patch tokenization, shifted patch tokenization (SPT), and SPT pooling.

Images are channels-last ``[B, H, W, C]``.  Patches are taken in row-major
order over the patch grid and flattened row-major over (row, column,
channel).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DomainError, Parameter, ShapeError, Tensor

# content displacement (rows, cols) for each direction name
DIRECTIONS: dict[str, tuple[int, int]] = {
    "up": (-1, 0),
    "down": (1, 0),
    "left": (0, -1),
    "right": (0, 1),
    "up-left": (-1, -1),
    "up-right": (-1, 1),
    "down-left": (1, -1),
    "down-right": (1, 1),
}

CARDINAL4 = ("up", "down", "left", "right")
DIAGONAL4 = ("up-left", "up-right", "down-left", "down-right")
CARDINAL8 = CARDINAL4 + DIAGONAL4
PRESETS = {"cardinal4": CARDINAL4, "diagonal4": DIAGONAL4, "cardinal8": CARDINAL8, "none": ()}


@dataclass(frozen=True)
class ShiftStrategy:
    """Shift directions plus the shift ratio (shift in pixels = ratio * patch size)."""

    directions: tuple[str, ...] = DIAGONAL4
    shift_ratio: float = 0.5

    def __post_init__(self):
        directions = tuple(self.directions)
        object.__setattr__(self, "directions", directions)
        unknown = [d for d in directions if d not in DIRECTIONS]
        if unknown:
            raise ValueError(f"unknown shift directions {unknown}")
        if len(set(directions)) != len(directions):
            raise ValueError(f"duplicate shift directions in {directions}")
        if not 0.0 < self.shift_ratio <= 1.0:
            raise ValueError(f"shift_ratio must lie in (0, 1], got {self.shift_ratio}")

    @classmethod
    def preset(cls, name: str, shift_ratio: float = 0.5) -> "ShiftStrategy":
        return cls(PRESETS[name.lower()], shift_ratio)

    @property
    def num_shifts(self) -> int:
        return len(self.directions)

    def shift_px(self, patch_size: int) -> int:
        """Round-half-up of ``patch_size * shift_ratio``."""
        shift = int(math.floor(patch_size * self.shift_ratio + 0.5))
        if not 0 < shift <= patch_size:
            raise DomainError(f"shift of {shift}px invalid for patch size {patch_size}")
        return shift

    def to_dict(self) -> dict:
        return {"directions": list(self.directions), "shift_ratio": self.shift_ratio}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftStrategy":
        return cls(tuple(d["directions"]), float(d["shift_ratio"]))


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int
    height: int
    width: int

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ShapeError(f"{self.height}x{self.width} image not divisible by patch size {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.height * self.width // self.patch_size ** 2


@dataclass
class TokenBatch:
    tokens: Tensor
    has_class_token: bool = False

    @property
    def hidden_dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def num_visual(self) -> int:
        return self.tokens.shape[1] - int(self.has_class_token)


@dataclass
class EmbeddingParams:
    """Learnable pieces of one tokenization stage.

    ``ln_gain``/``ln_bias`` are absent for plain tokenization; ``pos_embedding``
    is absent for pooling stages; ``cls_proj`` exists only for pooling stages
    of a model with a class token.
    """

    proj: Parameter
    ln_gain: Parameter | None = None
    ln_bias: Parameter | None = None
    cls_token: Parameter | None = None
    pos_embedding: Parameter | None = None
    cls_proj: Parameter | None = None

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.proj, self.ln_gain, self.ln_bias, self.cls_token,
                            self.pos_embedding, self.cls_proj) if p is not None]


# ---------------------------------------------------------------- patches

def partition_and_flatten(x, patch_size: int) -> Tensor:
    """``[B, H, W, C]`` -> ``[B, N, P*P*C]``."""
    x = ag.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B, H, W, C], got {x.shape}")
    b, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"{h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    blocks = ag.reshape(x, (b, gh, p, gw, p, c))
    blocks = ag.transpose(blocks, (0, 1, 3, 2, 4, 5))
    return ag.reshape(blocks, (b, gh * gw, p * p * c))


def unflatten_patches(patches, patch_size: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`partition_and_flatten`."""
    patches = ag.as_tensor(patches)
    b, n, flat = patches.shape
    p = patch_size
    gh, gw = height // p, width // p
    c = flat // (p * p)
    if gh * gw != n or c * p * p != flat:
        raise ShapeError(f"{patches.shape} does not tile a {height}x{width} image with P={p}")
    blocks = ag.reshape(patches, (b, gh, gw, p, p, c))
    blocks = ag.transpose(blocks, (0, 1, 3, 2, 4, 5))
    return ag.reshape(blocks, (b, height, width, c))


def tokenize_standard(x, patch_size: int, proj: Tensor) -> Tensor:
    """Flattened patches times the token projection, nothing else."""
    patches = partition_and_flatten(x, patch_size)
    if proj.shape[0] != patches.shape[-1]:
        raise ShapeError(f"projection has {proj.shape[0]} rows, patches have length {patches.shape[-1]}")
    return ag.matmul(patches, proj)


def receptive_field(r_trans: int, stride: int, kernel: int) -> int:
    """Receptive field of a conv-like tokenizer: ``r_trans * stride + (kernel - stride)``."""
    for name, v in (("r_trans", r_trans), ("stride", stride), ("kernel", kernel)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    return int(r_trans * stride + (kernel - stride))


# ----------------------------------------------------------------- shifts

def shift_and_crop(x, direction: str, shift_px: int) -> Tensor:
    """Translate image content by ``shift_px`` along ``direction``; vacated pixels are zero."""
    x = ag.as_tensor(x)
    _, h, w, _ = x.shape
    if shift_px < 0 or shift_px >= min(h, w):
        raise DomainError(f"shift of {shift_px}px does not fit a {h}x{w} image")
    if shift_px == 0:
        return x
    dy, dx = DIRECTIONS[direction]
    s = shift_px
    padded = ag.pad(x, [(0, 0), (s, s), (s, s), (0, 0)])
    top, left = s * (1 - dy), s * (1 - dx)
    return padded[:, top:top + h, left:left + w, :]


def spt_embed(x, strategy: ShiftStrategy, patch_size: int, params: EmbeddingParams,
              normalize: bool = True) -> Tensor:
    """Shifted patch tokens ``[B, N, d]`` (no class token, no positions).

    The image is concatenated with its shifted copies along channels, cut
    into patches, layer-normalized per flattened patch, then projected.
    ``normalize=False`` skips the layer norm.
    """
    x = ag.as_tensor(x)
    shift = strategy.shift_px(patch_size) if strategy.directions else 0
    stack = [x] + [shift_and_crop(x, d, shift) for d in strategy.directions]
    cat = ag.concat(stack, axis=-1) if len(stack) > 1 else x
    patches = partition_and_flatten(cat, patch_size)
    if normalize:
        patches = ag.layer_norm(patches, params.ln_gain, params.ln_bias)
    if params.proj.shape[0] != patches.shape[-1]:
        raise ShapeError(f"projection has {params.proj.shape[0]} rows, "
                         f"concatenated patches have length {patches.shape[-1]}")
    return ag.matmul(patches, params.proj)


def _attach_class_token(tokens: Tensor, cls: Tensor) -> Tensor:
    b, _, d = tokens.shape
    cls_rows = ag.add(ag.reshape(cls, (1, 1, d)), np.zeros((b, 1, d)))
    return ag.concat([cls_rows, tokens], axis=1)


def patch_embedding(x, patch_size: int, params: EmbeddingParams,
                    strategy: ShiftStrategy | None = None) -> TokenBatch:
    """Class token (if configured) plus positions on top of SPT or plain tokens.

    ``strategy=None`` selects plain tokenization; a strategy (even an empty one)
    selects SPT with its layer norm.
    """
    if strategy is None:
        tokens = tokenize_standard(x, patch_size, params.proj)
    else:
        tokens = spt_embed(x, strategy, patch_size, params)
    has_cls = params.cls_token is not None
    if has_cls:
        tokens = _attach_class_token(tokens, params.cls_token)
    if params.pos_embedding is not None:
        if params.pos_embedding.shape != tokens.shape[1:]:
            raise ShapeError(f"positional embedding {params.pos_embedding.shape} "
                             f"does not match tokens {tokens.shape[1:]}")
        tokens = ag.add(tokens, params.pos_embedding)
    return TokenBatch(tokens, has_cls)


def spt_patch_embedding(x, strategy: ShiftStrategy, patch_size: int,
                        params: EmbeddingParams) -> TokenBatch:
    return patch_embedding(x, patch_size, params, strategy)


def tokens_to_grid(tokens: Tensor) -> Tensor:
    """Reshape visual tokens ``[B, N, d]`` to ``[B, sqrt(N), sqrt(N), d]``."""
    b, n, d = tokens.shape
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"{n} visual tokens do not form a square grid")
    return ag.reshape(tokens, (b, side, side, d))


def grid_to_tokens(grid: Tensor) -> Tensor:
    b, gh, gw, d = grid.shape
    return ag.reshape(grid, (b, gh * gw, d))


def spt_pooling(y: TokenBatch, pool_size: int, params: EmbeddingParams,
                strategy: ShiftStrategy | None = None) -> TokenBatch:
    """Re-tokenize the token grid with patch size ``pool_size``.

    The class token (if any) is split off, projected by ``params.cls_proj`` and
    re-attached in front.  ``strategy=None`` pools with plain tokenization.
    """
    tokens = y.tokens
    if y.has_class_token:
        cls, visual = tokens[:, :1, :], tokens[:, 1:, :]
    else:
        cls, visual = None, tokens
    grid = tokens_to_grid(visual)
    if grid.shape[1] % pool_size:
        raise ShapeError(f"pool size {pool_size} does not divide token grid side {grid.shape[1]}")
    if strategy is None:
        pooled = tokenize_standard(grid, pool_size, params.proj)
    else:
        pooled = spt_embed(grid, strategy, pool_size, params)
    if cls is None:
        return TokenBatch(pooled, False)
    if params.cls_proj is None:
        raise ShapeError("pooling a class token needs a class-token projection")
    return TokenBatch(ag.concat([ag.matmul(cls, params.cls_proj), pooled], axis=1), True)


def patch_vector_length(patch_size: int, channels: int, strategy: ShiftStrategy | None) -> int:
    copies = 1 + (strategy.num_shifts if strategy is not None else 0)
    return patch_size * patch_size * channels * copies
