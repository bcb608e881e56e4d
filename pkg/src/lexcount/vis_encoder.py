"""Visual token encoder: stride-32 residual backbone, 1x1 compression, transformer."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import TransformerStack, learned_positions
from .errors import ContractError


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResidualDownBlock(nn.Module):
    """Stride-2 residual block; GroupNorm keeps tiny batches well behaved."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.n1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.n2 = _norm(out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=2)

    def forward(self, x):
        h = F.relu(self.n1(self.conv1(x)))
        h = self.n2(self.conv2(h))
        return F.relu(h + self.skip(x))


class ConvBackbone(nn.Module):
    """Stem plus one stride-2 stage per width entry; total stride 2**len(widths)."""

    def __init__(self, widths):
        super().__init__()
        self.widths = tuple(widths)
        self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, stride=2, padding=1), _norm(widths[0]), nn.ReLU())
        stages = []
        for i in range(1, len(widths)):
            stages.append(ResidualDownBlock(widths[i - 1], widths[i]))
        self.stages = nn.Sequential(*stages)

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def forward(self, x):
        return self.stages(self.stem(x))


@dataclass
class VisEncoderConfig:
    width: int = 64  # token width D_i (256 at paper scale)
    n_layers: int = 2  # 6 at paper scale
    n_heads: int = 4  # 8 at paper scale
    input_size: int = 64
    backbone_widths: tuple[int, ...] = (8, 16, 32, 64, 128)  # ends 2048 at paper scale
    freeze: bool = False

    def validate(self):
        if self.input_size % 32 != 0:
            raise ContractError(f"input_size must be a multiple of 32, got {self.input_size}")
        if self.width % self.n_heads != 0:
            raise ContractError("width must be divisible by n_heads")
        if 2 ** len(self.backbone_widths) != 32:
            raise ContractError("backbone must realize a total stride of 32")

    @property
    def grid(self) -> int:
        return self.input_size // 32

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


class VisualEncoder(nn.Module):
    def __init__(self, cfg: VisEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = ConvBackbone(cfg.backbone_widths)
        self.reduce = nn.Conv2d(self.backbone.out_channels, cfg.width, 1)
        self.positions = learned_positions(cfg.n_tokens, cfg.width)
        self.stack = TransformerStack(cfg.width, cfg.n_layers, cfg.n_heads)
        if cfg.freeze:
            self.requires_grad_(False)

    def _check_input(self, image: torch.Tensor):
        s = self.cfg.input_size
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2] != s or image.shape[3] != s:
            raise ContractError(f"expected image of shape (B, 3, {s}, {s}), got {tuple(image.shape)}")

    def backbone_features(self, image: torch.Tensor) -> torch.Tensor:
        """Pre-transformer feature map of shape (B, C, S/32, S/32)."""
        self._check_input(image)
        return self.backbone(image)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> visual tokens of shape (B, width, (S/32)**2)."""
        feats = self.backbone_features(image)
        tokens = self.reduce(feats).flatten(2).transpose(1, 2)  # (B, N_i, width)
        tokens = tokens + self.positions.to(tokens.dtype)
        tokens = self.stack(tokens)
        return tokens.transpose(1, 2)
