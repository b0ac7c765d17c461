"""Feature-map-to-feature-map transformer encoder.

Each pixel's channel vector is one token; there is no patch projection and
no class token, so a ``[B, H, W, C]`` map comes back out as ``[B, H, W, C]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import ShapeError, Tensor, gelu, matmul, reshape, softmax, transpose


class ConfigError(ValueError):
    """Raised for inconsistent architecture hyperparameters."""


@dataclass
class ViTConfig:
    depth: int = 2
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: float = 4.0
    seq_h: int = 8
    seq_w: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be > 0")
        if self.seq_h < 1 or self.seq_w < 1:
            raise ConfigError("grid dims must be >= 1")

    @property
    def num_tokens(self) -> int:
        return self.seq_h * self.seq_w


def tokens_from_map(x: Tensor) -> Tensor:
    """``[B, H, W, C] -> [B, H*W, C]``; pixel (y, x) becomes token ``y*W + x``."""
    if x.ndim != 4:
        raise ShapeError(f"expected a [B,H,W,C] map, got {list(x.shape)}")
    b, h, w, c = x.shape
    return reshape(x, (b, h * w, c))


def map_from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    b, n, c = t.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens cannot form a {h}x{w} grid")
    return reshape(t, (b, h, w, c))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self._last_attention: np.ndarray | None = None

    def _split(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        return transpose(reshape(t, (b, n, self.heads, c // self.heads)), (0, 2, 1, 3))

    def forward(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        d = c // self.heads
        q, k, v = self._split(self.q(t)), self._split(self.k(t)), self._split(self.v(t))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
        attn = softmax(scores, axis=-1)
        self._last_attention = attn.data
        mixed = transpose(matmul(attn, v), (0, 2, 1, 3))
        return self.proj(reshape(mixed, (b, n, c)))


class EncoderBlock(Module):
    """Pre-norm residual block: attention then a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator,
                 dtype=np.float32):
        hidden = max(1, int(round(dim * mlp_ratio)))
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, t: Tensor) -> Tensor:
        t = t + self.attn(self.norm1(t))
        return t + self.fc2(gelu(self.fc1(self.norm2(t))))


class ModifiedViT(Module):
    """Transformer encoder bound to one spatial grid."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, (cfg.num_tokens, cfg.embed_dim)), dtype=dtype)
        self.blocks = [EncoderBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng, dtype)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim, dtype)
        self._seq_lengths: list[int] = []

    @property
    def attention_maps(self) -> list[np.ndarray]:
        """Attention weights ``[B, heads, N, N]`` of each block from the last forward."""
        return [blk.attn._last_attention for blk in self.blocks]

    @property
    def seq_lengths(self) -> list[int]:
        """Token count entering each block (and the final norm) on the last forward."""
        return list(self._seq_lengths)

    def forward(self, x: Tensor) -> Tensor:
        _, h, w, c = x.shape
        cfg = self.cfg
        if (h, w) != (cfg.seq_h, cfg.seq_w):
            raise ShapeError(f"ViT configured for {cfg.seq_h}x{cfg.seq_w}, got {h}x{w}")
        if c != cfg.embed_dim:
            raise ShapeError(f"ViT embed_dim {cfg.embed_dim} != input channels {c}")
        t = tokens_from_map(x) + self.pos_embed
        lengths = []
        for blk in self.blocks:
            lengths.append(t.shape[1])
            t = blk(t)
        lengths.append(t.shape[1])
        self._seq_lengths = lengths
        return map_from_tokens(self.norm(t), h, w)


def vit_forward(x: Tensor, vit: ModifiedViT) -> Tensor:
    return vit(x)
