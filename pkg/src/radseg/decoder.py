"""Bottleneck token decoder.

Pipeline per image::

    pyramid -> fuse (T0) -> global attention (T1) -> dilated local refine (T2)
            -> HR cross-attention (C) + texture branch (B)
            -> three-way gate over {T0, C, B} -> class logits on the lattice

Everything here runs at the bottleneck lattice (stride 16). The high-resolution
stream f1 is consulted exactly once, through :meth:`Decoder.hr_cross_attend`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .encoder import FeaturePyramid
from .tensor import Tensor

LATTICE_STRIDE = 16


@dataclass
class DecoderConfig:
    width: int = 128
    heads: int = 4
    num_classes: int = 6
    dilations: list[int] = field(default_factory=lambda: [1, 2, 3])

    def validate(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"decoder width {self.width} not divisible by {self.heads} heads")


@dataclass
class GateWeights:
    """Per-image blend weights over (T0, C, B); shape ``(..., 3)``."""

    w: np.ndarray

    @property
    def w_t0(self):
        return self.w[..., 0]

    @property
    def w_c(self):
        return self.w[..., 1]

    @property
    def w_b(self):
        return self.w[..., 2]


@dataclass
class DecoderOutput:
    t0: Tensor
    t1: Tensor
    t2: Tensor
    c: Tensor | None
    b: Tensor | None
    tokens: Tensor
    gate: GateWeights
    logits: Tensor
    class_attn: Tensor
    f_hr: Tensor | None


def lattice_size(h: int, w: int) -> tuple[int, int]:
    return h // LATTICE_STRIDE, w // LATTICE_STRIDE


class LocalRefine(nn.Module):
    """phi(x) = mix(ReLU(sum_d depthwise_d(x))) over parallel dilations; returns x + phi(x)."""

    def __init__(self, rng, width: int, dilations):
        self.dilations = list(dilations)
        self.kernels = [nn.param(nn.normal(rng, (width, 3, 3), 1.0 / 3.0)) for _ in self.dilations]
        self.mix = nn.Pointwise(rng, width, width)

    def __call__(self, x: Tensor) -> Tensor:
        acc = None
        for k, d in zip(self.kernels, self.dilations):
            y = T.depthwise_conv2d(x, k, d)
            acc = y if acc is None else acc + y
        return x + self.mix(T.relu(acc))


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, stage_channels, seed: int,
                 gltr: bool = True, rad: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.gltr = gltr
        self.rad = rad
        d, nc = cfg.width, cfg.num_classes

        def rng(tag: int):
            return np.random.default_rng([seed, 100 + tag])

        r = rng(0)
        self.proj = [nn.Pointwise(r, c, d) for c in stage_channels]
        self.fusion = nn.Pointwise(r, 4 * d, d)
        if gltr:
            r = rng(1)
            self.attn = nn.MultiHeadAttention(r, d, cfg.heads)
            self.local = LocalRefine(r, d, cfg.dilations)
        if rad:
            r = rng(2)
            self.hr_proj = nn.Pointwise(r, stage_channels[0], d)
            self.cross = nn.MultiHeadAttention(r, d, cfg.heads)
            self.tex1 = nn.Conv2d(r, stage_channels[1], d, 3, padding=1)
            self.tex2 = nn.Conv2d(r, d, d, 3, padding=1)
            self.gate_u = nn.param(np.zeros((3, d)))
            self.gate_b = nn.param(np.zeros(3))
        r = rng(3)
        self.classifier = nn.Pointwise(r, d, nc)
        self.class_head = nn.Pointwise(r, d, nc)

    # -- stages -----------------------------------------------------------

    def fuse_bottleneck(self, pyr: FeaturePyramid) -> Tensor:
        f1 = pyr.f1
        h, w = f1.shape[-2] * 4, f1.shape[-1] * 4
        hf, wf = lattice_size(h, w)
        aligned = []
        for i, (f, proj) in enumerate(zip(pyr, self.proj)):
            want = (h >> (i + 2), w >> (i + 2))
            if tuple(f.shape[-2:]) != want:
                raise ValueError(f"f{i + 1} has spatial {f.shape[-2:]}, expected {want}")
            aligned.append(T.bilinear_resize(proj(f), hf, wf))
        return T.relu(self.fusion(T.concat(aligned, axis=-3)))

    def global_attend(self, t0: Tensor) -> Tensor:
        h, w = t0.shape[-2:]
        z = self.attn(nn.to_tokens(t0))
        return t0 + nn.from_tokens(z, h, w)

    def local_refine(self, t1: Tensor) -> Tensor:
        return self.local(t1)

    def project_hr(self, f1: Tensor) -> Tensor:
        return self.hr_proj(f1)

    def hr_cross_attend(self, t2: Tensor, f_hr: Tensor) -> Tensor:
        h, w = t2.shape[-2:]
        out = self.cross(nn.to_tokens(t2), nn.to_tokens(f_hr))
        return nn.from_tokens(out, h, w)

    def texture_branch(self, pyr: FeaturePyramid, hf: int, wf: int) -> Tensor:
        x = self.tex2(T.relu(self.tex1(pyr.f2)))
        return T.bilinear_resize(x, hf, wf)

    def gated_mix(self, t0: Tensor, c: Tensor, b: Tensor) -> tuple[Tensor, GateWeights]:
        if not (t0.shape == c.shape == b.shape):
            raise ValueError(f"gate inputs differ in shape: {t0.shape}, {c.shape}, {b.shape}")
        lead = t0.shape[:-3]
        z = T.reshape(T.mean(t0, axis=(-2, -1)), lead + (1, t0.shape[-3]))
        energy = T.matmul(z, T.transpose(self.gate_u, (1, 0))) + self.gate_b
        w = T.softmax(energy, axis=-1)
        out = None
        for k, src in enumerate((t0, c, b)):
            wk = T.reshape(w[..., 0, k], lead + (1, 1, 1))
            term = wk * src
            out = term if out is None else out + term
        return out, GateWeights(w.data[..., 0, :].copy())

    # -- full pass ----------------------------------------------------------

    def __call__(self, pyr: FeaturePyramid) -> DecoderOutput:
        f1 = pyr.f1
        hf, wf = lattice_size(f1.shape[-2] * 4, f1.shape[-1] * 4)
        lead = f1.shape[:-3]
        with T.scope("fuse"):
            t0 = self.fuse_bottleneck(pyr)
        if self.gltr:
            with T.scope("gltr"):
                t1 = self.global_attend(t0)
                t2 = self.local_refine(t1)
        else:
            t1 = t2 = t0
        c = b = f_hr = None
        if self.rad:
            with T.scope("hr_cross_attend"):
                f_hr = self.project_hr(f1)
                c = self.hr_cross_attend(t2, f_hr)
            with T.scope("texture"):
                b = self.texture_branch(pyr, hf, wf)
            with T.scope("gate"):
                tokens, gate = self.gated_mix(t0, c, b)
        else:
            tokens = t2
            gate = GateWeights(np.broadcast_to(np.array([1.0, 0.0, 0.0]), lead + (3,)).copy())
        with T.scope("heads"):
            logits = self.classifier(tokens)
            class_attn = self.class_head(tokens)
        return DecoderOutput(t0, t1, t2, c, b, tokens, gate, logits, class_attn, f_hr)
