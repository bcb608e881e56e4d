"""Multimodal fusion and exemplar bounding-box regression.

Learnable location tokens are prepended to the projected language tokens and
the visual tokens; after the fusion stack, the embeddings at the location
positions are decoded into normalized (x, y, h, w) boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import TransformerStack, init_linear
from .data import BBox
from .errors import ConfigError, ContractError, NumericalError
from .lang_encoder import LangEncoderConfig, LanguageEncoder, TokenSequence, Vocabulary, collate_tokens
from .vis_encoder import VisEncoderConfig, VisualEncoder

VARIANTS = ("E", "EV", "full")


@dataclass
class FusionConfig:
    width: int = 64  # 256 at paper scale
    n_layers: int = 2  # 6 at paper scale
    n_heads: int = 4
    n_exemplars: int = 1
    project_lang: bool = True

    def validate(self):
        if self.width % self.n_heads != 0:
            raise ContractError("width must be divisible by n_heads")
        if self.n_exemplars not in (1, 3):
            raise ContractError("n_exemplars must be 1 or 3")


class FusionModule(nn.Module):
    def __init__(self, cfg: FusionConfig, lang_width: int, vis_width: int | None):
        super().__init__()
        cfg.validate()
        if not cfg.project_lang and lang_width != cfg.width:
            raise ConfigError("project_lang=false requires the language width to equal the fusion width")
        if vis_width is not None and vis_width != cfg.width:
            raise ContractError(f"visual token width {vis_width} must equal fusion width {cfg.width}")
        self.cfg = cfg
        # independently initialized so multiple heads break symmetry from step 0
        self.loc_tokens = nn.Parameter(torch.empty(cfg.n_exemplars, cfg.width))
        nn.init.trunc_normal_(self.loc_tokens, std=0.02)
        self.lang_proj = None
        if cfg.project_lang:
            self.lang_proj = nn.Linear(lang_width, cfg.width)
            init_linear(self.lang_proj)
        self.stack = TransformerStack(cfg.width, cfg.n_layers, cfg.n_heads)

    def forward(
        self,
        lang_tokens: torch.Tensor,
        lang_mask: torch.Tensor,
        vis_tokens: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Fuse (B, D_l, N_l) + optional (B, D_i, N_i) -> (B, width, n_exemplars)."""
        b = lang_tokens.shape[0]
        x_l = lang_tokens.transpose(1, 2)
        if self.lang_proj is not None:
            x_l = self.lang_proj(x_l)
        if x_l.shape[-1] != self.cfg.width:
            raise ContractError("language tokens do not match the fusion width after projection")
        k = self.cfg.n_exemplars
        parts = [self.loc_tokens.to(x_l.dtype).expand(b, k, -1), x_l]
        masks = [
            torch.ones(b, k, dtype=torch.bool, device=x_l.device),
            lang_mask.bool(),
        ]
        if vis_tokens is not None and vis_tokens.shape[-1] > 0:
            if vis_tokens.shape[1] != self.cfg.width:
                raise ContractError("visual tokens do not match the fusion width")
            x_i = vis_tokens.transpose(1, 2)
            parts.append(x_i)
            masks.append(torch.ones(b, x_i.shape[1], dtype=torch.bool, device=x_l.device))
        x = torch.cat(parts, dim=1)
        attend = torch.cat(masks, dim=1)
        y = self.stack(x, attend_mask=attend)
        return y[:, :k].transpose(1, 2)


class BBoxHead(nn.Module):
    """Three linear projections with a final sigmoid; boxes stay in (0, 1)."""

    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.fc3 = nn.Linear(width, 4)
        for m in (self.fc1, self.fc2, self.fc3):
            init_linear(m)
        # start boxes centred with small extent: if the raw h/w sigmoid
        # saturates past the x+w<=1 clamp it stops receiving gradient
        with torch.no_grad():
            self.fc3.bias[2:] = math.log(0.25)  # sigmoid -> 0.2

    def forward(self, loc_embeddings: torch.Tensor) -> torch.Tensor:
        """(B, width, n_exemplars) -> boxes (B, n_exemplars, 4) as (x, y, h, w)."""
        if torch.isnan(loc_embeddings).any():
            raise NumericalError("NaN in location embeddings")
        h = loc_embeddings.transpose(1, 2)
        h = F.relu(self.fc1(h))
        h = F.relu(self.fc2(h))
        raw = torch.sigmoid(self.fc3(h))
        x, y, bh, bw = raw.unbind(-1)
        bh = torch.minimum(bh, 1.0 - y)
        bw = torch.minimum(bw, 1.0 - x)
        return torch.stack([x, y, bh, bw], dim=-1)


def boxes_from_tensor(boxes: torch.Tensor) -> list[BBox]:
    """(n_exemplars, 4) tensor -> BBox list."""
    return [BBox(x=float(b[0]), y=float(b[1]), h=float(b[2]), w=float(b[3])) for b in boxes.detach().cpu()]


class ExemplarPerceptron(nn.Module):
    """Language (+ optional visual) encoding, fusion, and box regression.

    Variants: "E" drops the visual branch entirely, "EV" keeps it frozen,
    "full" fine-tunes everything.
    """

    def __init__(
        self,
        lang_cfg: LangEncoderConfig,
        vis_cfg: VisEncoderConfig | None,
        fusion_cfg: FusionConfig,
        variant: str = "full",
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.lang = LanguageEncoder(lang_cfg)
        self.vis = None
        if variant != "E":
            if vis_cfg is None:
                raise ConfigError(f"variant {variant!r} needs a visual encoder config")
            if variant == "EV":
                vis_cfg.freeze = True
            self.vis = VisualEncoder(vis_cfg)
        self.fusion = FusionModule(fusion_cfg, lang_cfg.width, None if self.vis is None else vis_cfg.width)
        self.bbox_head = BBoxHead(fusion_cfg.width)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor, image: torch.Tensor | None = None) -> torch.Tensor:
        """Predict exemplar boxes (B, n_exemplars, 4)."""
        f_l = self.lang(ids, mask)
        f_i = None
        if self.vis is not None:
            if image is None:
                raise ContractError(f"variant {self.variant!r} requires an image")
            f_i = self.vis(image)
        loc = self.fusion(f_l, mask, f_i)
        return self.bbox_head(loc)

    def perceive(self, tokens: TokenSequence, vocab: Vocabulary, image: torch.Tensor | None = None) -> list[BBox]:
        """Single-sample convenience wrapper returning BBox objects."""
        tokens.validate(vocab)
        ids, mask = collate_tokens([tokens])
        param = next(self.parameters())
        ids, mask = ids.to(param.device), mask.to(param.device)
        if image is not None and image.ndim == 3:
            image = image[None]
        if image is not None:
            image = image.to(param.dtype)
        with torch.no_grad():
            boxes = self.forward(ids, mask, image)
        return boxes_from_tensor(boxes[0])
