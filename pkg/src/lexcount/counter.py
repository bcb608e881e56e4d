"""Zero-shot counting branch: exemplar crop, dual backbones, cross-attention
recalibration and count regression (scalar, density-map, or both)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import init_linear
from .errors import ConfigError, ContractError, NumericalError
from .vis_encoder import ConvBackbone

HEADS = ("count", "density", "hybrid")


@dataclass
class CounterConfig:
    exemplar_size: int = 64  # 128 at paper scale
    feat_width: int = 64  # 256 at paper scale
    backbone_widths: tuple[int, ...] = (8, 16, 32, 64)  # stride 16
    head: str = "count"
    count_hidden: int = 64
    input_size: int = 64  # raw image side fed to the image branch

    def validate(self):
        if self.exemplar_size % 16 != 0:
            raise ContractError("exemplar_size must be divisible by 16")
        if self.feat_width < 1:
            raise ContractError("feat_width must be positive")
        if 2 ** len(self.backbone_widths) != 16:
            raise ContractError("counting backbones must realize a total stride of 16")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.input_size % 16 != 0:
            raise ContractError("input_size must be divisible by 16")

    @property
    def exemplar_grid(self) -> int:
        return self.exemplar_size // 16

    @property
    def image_grid(self) -> int:
        return self.input_size // 16

    @property
    def n_patches(self) -> int:
        return self.exemplar_grid * self.exemplar_grid


@dataclass
class FeatureBundle:
    """Named intermediates of one counting pass."""

    F_e: torch.Tensor  # (B, feat_width, E/16, E/16)
    F_I: torch.Tensor  # (B, feat_width, H/16, W/16)
    F_e_hat: torch.Tensor  # (B, 1, feat_width), refined exemplar vector
    similarity: torch.Tensor  # (B, H/16, W/16)


@dataclass
class CountPrediction:
    count: torch.Tensor  # (B,), non-negative
    similarity: torch.Tensor  # (B, H/16, W/16)
    density: Optional[torch.Tensor] = None  # (B, H/16, W/16), non-negative
    features: Optional[FeatureBundle] = None


def crop_exemplar(image: torch.Tensor, box: torch.Tensor, exemplar_size: int) -> torch.Tensor:
    """Crop the (x, y, h, w) box from each image and resize to the exemplar size.

    Box coordinates are treated as constants (hard crop, no gradient to the
    coordinates); degenerate boxes are dilated symmetrically to at least
    2x2 pixels before cropping.
    """
    if image.ndim != 4:
        raise ContractError("image must be (B, 3, H, W)")
    if torch.isnan(box).any():
        raise NumericalError("NaN in exemplar box")
    box = box.detach()
    b, _, h_img, w_img = image.shape
    crops = []
    for i in range(b):
        x, y, bh, bw = (float(v) for v in box[i])
        h_px = max(int(round(bh * h_img)), 2)
        w_px = max(int(round(bw * w_img)), 2)
        h_px, w_px = min(h_px, h_img), min(w_px, w_img)
        cy = (y + bh / 2.0) * h_img
        cx = (x + bw / 2.0) * w_img
        y0 = int(round(cy - h_px / 2.0))
        x0 = int(round(cx - w_px / 2.0))
        y0 = min(max(y0, 0), h_img - h_px)
        x0 = min(max(x0, 0), w_img - w_px)
        patch = image[i : i + 1, :, y0 : y0 + h_px, x0 : x0 + w_px]
        crops.append(F.interpolate(patch, size=(exemplar_size, exemplar_size), mode="bilinear", align_corners=False))
    return torch.cat(crops, dim=0)


class FineGrainedExtractor(nn.Module):
    """Patch split -> linear projection -> learned 1x1 aggregation over patches.

    With uniform aggregation weights and an identity projection this reduces
    to average pooling; the learned weights make it strictly more general.
    """

    def __init__(self, feat_width: int, n_patches: int):
        super().__init__()
        self.n_patches = n_patches
        self.proj = nn.Linear(feat_width, feat_width)
        init_linear(self.proj)
        self.aggregate = nn.Conv1d(n_patches, 1, kernel_size=1)
        nn.init.trunc_normal_(self.aggregate.weight, std=0.02)
        nn.init.zeros_(self.aggregate.bias)

    def forward(self, f_e: torch.Tensor) -> torch.Tensor:
        """(B, feat_width, g, g) -> (B, 1, feat_width)."""
        b, c, gh, gw = f_e.shape
        if gh * gw != self.n_patches:
            raise ContractError(f"expected {self.n_patches} patches, got {gh * gw}")
        patches = f_e.flatten(2).transpose(1, 2)  # (B, P, C)
        return self.aggregate(self.proj(patches))


class CrossAttentionRecalibration(nn.Module):
    """Mutual channel gating between the exemplar vector and the image map.

    The image-side gate comes from a Gram product of the (scaled) flattened
    map with itself, reduced to one weight per channel; the exemplar-side
    gate is a plain linear + sigmoid.
    """

    def __init__(self, feat_width: int):
        super().__init__()
        self.alpha1 = nn.Parameter(torch.tensor(1.0))
        self.alpha2 = nn.Parameter(torch.tensor(1.0))
        # reduces the feat_width x feat_width Gram matrix to 1 x feat_width
        self.gram_weight = nn.Parameter(torch.empty(feat_width))
        nn.init.trunc_normal_(self.gram_weight, std=0.02)
        self.gram_bias = nn.Parameter(torch.zeros(feat_width))
        self.l2 = nn.Linear(feat_width, feat_width)
        init_linear(self.l2)

    def forward(self, f_e_hat: torch.Tensor, f_i: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """((B, 1, C), (B, C, M)) -> recalibrated (F_e_hat', F_I')."""
        if torch.isnan(f_e_hat).any() or torch.isnan(f_i).any():
            raise NumericalError("NaN entering cross-attention recalibration")
        gram = (self.alpha1 * f_i) @ (self.alpha2 * f_i).transpose(1, 2)  # (B, C, C)
        w1 = torch.sigmoid(torch.einsum("c,bcd->bd", self.gram_weight, gram) + self.gram_bias)
        w2 = torch.sigmoid(self.l2(f_e_hat))  # (B, 1, C)
        f_e_out = f_e_hat * w1[:, None, :]
        f_i_out = f_i * w2.transpose(1, 2)  # channel-wise broadcast over locations
        return f_e_out, f_i_out


class CountingBranch(nn.Module):
    def __init__(self, cfg: CounterConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        # two independent parameter sets on purpose: single- and multi-instance
        # inputs want different receptive semantics
        self.exemplar_backbone = ConvBackbone(cfg.backbone_widths)
        self.image_backbone = ConvBackbone(cfg.backbone_widths)
        self.exemplar_reduce = nn.Conv2d(self.exemplar_backbone.out_channels, cfg.feat_width, 1)
        self.image_reduce = nn.Conv2d(self.image_backbone.out_channels, cfg.feat_width, 1)
        self.extractor = FineGrainedExtractor(cfg.feat_width, cfg.n_patches)
        self.recalibrate = CrossAttentionRecalibration(cfg.feat_width)
        m = cfg.image_grid * cfg.image_grid
        self.count_fc1 = nn.Linear(m, cfg.count_hidden)
        self.count_fc2 = nn.Linear(cfg.count_hidden, 1)
        init_linear(self.count_fc1)
        init_linear(self.count_fc2)
        self.density_conv = nn.Conv2d(cfg.feat_width + 1, 1, 1)

    def dual_features(self, image: torch.Tensor, exemplar: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f_e = self.exemplar_reduce(self.exemplar_backbone(exemplar))
        f_i = self.image_reduce(self.image_backbone(image))
        return f_e, f_i

    def regress_count(self, f_e_hat: torch.Tensor, f_i: torch.Tensor, grid_hw: tuple[int, int]) -> CountPrediction:
        """Similarity map + the configured head(s); counts are non-negative."""
        gh, gw = grid_hw
        sim = (f_e_hat @ f_i).reshape(-1, gh, gw)
        density = None
        if self.cfg.head in ("density", "hybrid"):
            stacked = torch.cat([f_i.reshape(-1, self.cfg.feat_width, gh, gw), sim[:, None]], dim=1)
            density = F.softplus(self.density_conv(stacked))[:, 0]
        if self.cfg.head == "density":
            count = density.sum(dim=(1, 2))
        else:
            h = F.relu(self.count_fc1(sim.flatten(1)))
            count = F.softplus(self.count_fc2(h))[:, 0]
        return CountPrediction(count=count, similarity=sim, density=density)

    def forward(self, image: torch.Tensor, boxes: torch.Tensor, with_features: bool = False) -> CountPrediction:
        """Count using predicted exemplar boxes of shape (B, K, 4).

        With K > 1 the refined exemplar vectors are averaged before
        recalibration.
        """
        if boxes.ndim == 2:
            boxes = boxes[:, None]
        f_i = self.image_reduce(self.image_backbone(image))
        vecs = []
        f_e_first = None
        for k in range(boxes.shape[1]):
            exemplar = crop_exemplar(image, boxes[:, k], self.cfg.exemplar_size)
            f_e = self.exemplar_reduce(self.exemplar_backbone(exemplar))
            if k == 0:
                f_e_first = f_e
            vecs.append(self.extractor(f_e))
        f_e_hat = torch.stack(vecs).mean(dim=0)
        gh, gw = f_i.shape[2], f_i.shape[3]
        f_e_cal, f_i_cal = self.recalibrate(f_e_hat, f_i.flatten(2))
        pred = self.regress_count(f_e_cal, f_i_cal, (gh, gw))
        if with_features:
            pred.features = FeatureBundle(F_e=f_e_first, F_I=f_i, F_e_hat=f_e_hat, similarity=pred.similarity)
        return pred
