"""Four-stage hierarchical tokenizer producing the feature pyramid f1..f4."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

STRIDES = (4, 8, 16, 32)


@dataclass
class EncoderConfig:
    in_channels: int = 3
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 160, 256])
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    heads_per_stage: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    mlp_ratio: int = 4
    zero_init_residual: bool = False

    def validate(self) -> None:
        for name in ("stage_channels", "stage_depths", "heads_per_stage"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs 4 entries")
        ch = self.stage_channels
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"stage_channels must be strictly increasing: {ch}")
        for c, h in zip(ch, self.heads_per_stage):
            if c % h:
                raise ValueError(f"stage width {c} not divisible by {h} heads")


@dataclass
class FeaturePyramid:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def __iter__(self):
        return iter((self.f1, self.f2, self.f3, self.f4))


def check_input_size(h: int, w: int) -> None:
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise ValueError(f"input size {h}x{w} must be a positive multiple of 32 in both dims")


class PatchEmbed(nn.Module):
    """7x7 convolution, stride 4, padding 3."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv = nn.Conv2d(rng, c_in, c_out, 7, stride=4, padding=3)

    def __call__(self, image: Tensor) -> Tensor:
        check_input_size(*image.shape[-2:])
        return self.conv(image)


class PatchMerge(nn.Module):
    """2x2 convolution with stride 2."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv = nn.Conv2d(rng, c_in, c_out, 2, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"patch merge needs even spatial dims, got {h}x{w}")
        return self.conv(x)


class Block(nn.Module):
    """Pre-norm transformer block: MHSA then a GELU MLP, both residual."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int, zero_out: bool):
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiHeadAttention(rng, dim, heads, zero_out=zero_out)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(rng, dim * mlp_ratio, dim, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class Stage(nn.Module):
    def __init__(self, rng, idx: int, c_in: int, cfg: EncoderConfig):
        c_out = cfg.stage_channels[idx]
        self.embed = PatchEmbed(rng, c_in, c_out) if idx == 0 else PatchMerge(rng, c_in, c_out)
        self.blocks = [Block(rng, c_out, cfg.heads_per_stage[idx], cfg.mlp_ratio,
                             cfg.zero_init_residual)
                       for _ in range(cfg.stage_depths[idx])]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.embed(x)
        if not self.blocks:
            return x
        h, w = x.shape[-2:]
        tok = nn.to_tokens(x)
        for blk in self.blocks:
            tok = blk(tok)
        return nn.from_tokens(tok, h, w)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        chans = [cfg.in_channels] + list(cfg.stage_channels)
        self.stages = [Stage(rng, i, chans[i], cfg) for i in range(4)]

    def __call__(self, image: Tensor) -> FeaturePyramid:
        check_input_size(*image.shape[-2:])
        if image.shape[-3] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {image.shape[-3]}")
        feats = []
        x = image
        for i, stage in enumerate(self.stages):
            with T.scope(f"stage{i + 1}"):
                x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)
