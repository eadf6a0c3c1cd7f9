"""Full segmentation network: encoder, bottleneck decoder, point refinement, loss wiring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses, nn
from . import tensor as T
from .capr import CaprConfig, PointRefiner, UncertaintySelection, upsample_logits
from .decoder import LATTICE_STRIDE, Decoder, DecoderConfig, DecoderOutput
from .encoder import Encoder, EncoderConfig, FeaturePyramid
from .metrics import IGNORE
from .tensor import Tensor


@dataclass
class Ablation:
    """Component switches; all on is the full model, all off the baseline."""

    gltr: bool = True
    rad: bool = True
    capr: bool = True
    bbl: bool = True


VARIANTS: list[tuple[str, Ablation]] = [
    ("baseline", Ablation(False, False, False, False)),
    ("+GLTR", Ablation(True, False, False, False)),
    ("+RAD", Ablation(True, True, False, False)),
    ("+CAPR", Ablation(True, True, True, False)),
    ("+BBL", Ablation(True, True, True, True)),
]


@dataclass
class ModelOutput:
    pyramid: FeaturePyramid
    decoder: DecoderOutput
    logits_up: Tensor
    logits: Tensor
    selections: list[UncertaintySelection] = field(default_factory=list)


class SegModel(nn.Module):
    def __init__(self, encoder: EncoderConfig, decoder: DecoderConfig, capr: CaprConfig,
                 flags: Ablation | None = None, seed: int = 0):
        self.flags = flags or Ablation()
        self.encoder = Encoder(encoder, np.random.default_rng([seed, 1]))
        self.decoder = Decoder(decoder, encoder.stage_channels, seed,
                               gltr=self.flags.gltr, rad=self.flags.rad)
        self.capr = (PointRefiner(capr, encoder.stage_channels[0], decoder.num_classes, seed)
                     if self.flags.capr else None)
        if self.flags.bbl:
            self.pair_w = nn.param(np.array(10.0))
            self.pair_b = nn.param(np.array(0.0))

    @property
    def num_classes(self) -> int:
        return self.decoder.cfg.num_classes

    def __call__(self, images: Tensor, capr_k: int | None = None,
                 fixed_selections: list[UncertaintySelection] | None = None) -> ModelOutput:
        h, w = images.shape[-2:]
        with T.scope("encoder"):
            pyr = self.encoder(images)
        with T.scope("decoder"):
            dec = self.decoder(pyr)
        with T.scope("upsample"):
            logits_up = upsample_logits(dec.logits, h, w)
        if self.capr is None:
            return ModelOutput(pyr, dec, logits_up, logits_up)
        with T.scope("capr"):
            f_hr_up = T.bilinear_resize(pyr.f1, h, w)
            refined, sels = self.capr(logits_up, f_hr_up, capr_k, fixed_selections)
        return ModelOutput(pyr, dec, logits_up, refined, sels)

    def predict(self, images, capr_k: int | None = None) -> np.ndarray:
        """Argmax labels at input resolution, computed without a tape."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        with T.no_tape():
            out = self(x, capr_k)
        return np.argmax(out.logits.data, axis=-3)


def downsample_labels(labels: np.ndarray, stride: int = LATTICE_STRIDE,
                      ignore: int = IGNORE) -> np.ndarray:
    """Majority vote per ``stride x stride`` cell; ignore only when it is the sole label.

    Vote ties go to the smaller class id.
    """
    labels = np.asarray(labels)
    *lead, h, w = labels.shape
    hs, ws = h // stride, w // stride
    cells = labels[..., :hs * stride, :ws * stride].reshape(*lead, hs, stride, ws, stride)
    cells = np.moveaxis(cells, -3, -2).reshape(*lead, hs, ws, stride * stride)
    flat = cells.reshape(-1, stride * stride)
    out = np.empty(len(flat), dtype=np.int64)
    for n, row in enumerate(flat):
        valid = row[row != ignore]
        out[n] = ignore if valid.size == 0 else np.bincount(valid).argmax()
    return out.reshape(*lead, hs, ws)


@dataclass
class LossParts:
    total: Tensor
    seg: Tensor
    diag: Tensor | None
    bbl: Tensor | None
    lambda_bbl: float

    def scalars(self) -> dict[str, float]:
        out = {"total": self.total.item(), "seg": self.seg.item()}
        out["diag"] = self.diag.item() if self.diag is not None else 0.0
        out["bbl"] = self.bbl.item() if self.bbl is not None else 0.0
        out["lambda_bbl"] = self.lambda_bbl
        return out


def compute_losses(model: SegModel, out: ModelOutput, targets: np.ndarray,
                   weights: losses.LossWeights, progress: float,
                   r_band: int = 2, r_ring: int = 1) -> LossParts:
    """Full objective for a batch; ``targets`` are ``(B, H, W)`` training labels."""
    targets = np.asarray(targets)
    with T.scope("loss.seg"):
        seg = losses.seg_loss(out.logits, targets)
    gt_ds = downsample_labels(targets)
    diag = None
    if weights.lambda_diag > 0:
        with T.scope("loss.diag"):
            diag = losses.diag_loss(out.decoder.class_attn, gt_ds)
    bbl = None
    if model.flags.bbl:
        with T.scope("loss.bbl"):
            tokens = out.decoder.tokens
            if tokens.ndim == 3:
                bands = losses.build_band(gt_ds, r_band, r_ring)
            else:
                bands = [losses.build_band(g, r_band, r_ring) for g in gt_ds]
            bbl = losses.bbl_loss(tokens, bands, list(gt_ds) if tokens.ndim == 4 else gt_ds,
                                  model.pair_w, model.pair_b)
    lam = weights.lambda_bbl(progress)
    total = losses.total_loss(seg, diag, bbl, weights, progress)
    return LossParts(total, seg, diag, bbl, lam)
