"""Shared transformer building blocks (pre-norm, so zero weights act as identity)."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError


def init_linear(module: nn.Linear):
    nn.init.trunc_normal_(module.weight, std=0.02)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


class SelfAttention(nn.Module):
    def __init__(self, width: int, n_heads: int):
        super().__init__()
        if width % n_heads != 0:
            raise ContractError(f"width {width} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        init_linear(self.qkv)
        init_linear(self.proj)

    def forward(self, x: torch.Tensor, attend_mask: torch.Tensor | None = None) -> torch.Tensor:
        # x: (B, N, D); attend_mask: (B, N) bool, True = usable as key
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if attend_mask is not None:
            scores = scores.masked_fill(~attend_mask[:, None, None, :], float("-inf"))
        attn = F.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, width: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, n_heads)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)
        init_linear(self.fc1)
        init_linear(self.fc2)

    def forward(self, x: torch.Tensor, attend_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), attend_mask)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class TransformerStack(nn.Module):
    def __init__(self, width: int, n_layers: int, n_heads: int):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(width, n_heads) for _ in range(n_layers))

    def forward(self, x: torch.Tensor, attend_mask: torch.Tensor | None = None) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, attend_mask)
        return x


def learned_positions(n: int, width: int) -> nn.Parameter:
    pos = nn.Parameter(torch.empty(n, width))
    nn.init.trunc_normal_(pos, std=0.02)
    return pos
