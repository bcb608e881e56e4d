"""Expression tokenizer and the linguistic transformer encoder.

Sequences are assembled as [Loc] + words + [sep], padded or truncated to a
fixed token count; the leading [Loc] position doubles as the regression
context inside the downstream fusion stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn as nn

from .blocks import TransformerStack, learned_positions
from .data import ExpressionAnnotation, words
from .errors import ContractError, ValidationError

PAD, UNK, LOC, SEP = "[PAD]", "[UNK]", "[Loc]", "[sep]"
SPECIALS = (PAD, UNK, LOC, SEP)


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]

    def __post_init__(self):
        self.validate()

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def loc_id(self) -> int:
        return self.token_to_id[LOC]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    def validate(self):
        ids = list(self.token_to_id.values())
        if len(set(ids)) != len(ids):
            raise ValidationError("vocabulary mapping must be injective")
        for special in SPECIALS:
            if special not in self.token_to_id:
                raise ValidationError(f"vocabulary missing special token {special}")
        if any(i < 0 or i >= self.size for i in ids):
            raise ValidationError("vocabulary ids must lie in [0, size)")

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        mapping = {tok: i for i, tok in enumerate(SPECIALS)}
        seen = set()
        for text in texts:
            seen.update(words(text))
        for tok in sorted(seen):
            mapping[tok] = len(mapping)
        return cls(mapping)

    def save(self, path):
        payload = {
            "specials": {"pad": PAD, "unk": UNK, "loc": LOC, "sep": SEP},
            "tokens": self.token_to_id,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text())
        return cls({str(k): int(v) for k, v in payload["tokens"].items()})


@dataclass
class TokenSequence:
    ids: np.ndarray  # int64, length n_tokens
    mask: np.ndarray  # bool, True = real token
    n_tokens: int

    def validate(self, vocab: Vocabulary):
        if len(self.ids) != self.n_tokens or len(self.mask) != self.n_tokens:
            raise ContractError("token sequence length mismatch")
        if self.ids[0] != vocab.loc_id:
            raise ContractError("position 0 must be the [Loc] token")
        real = np.nonzero(self.mask)[0]
        if len(real) < 2 or self.ids[real[-1]] != vocab.sep_id:
            raise ContractError("last real token must be [sep]")


@dataclass
class LangEncoderConfig:
    width: int = 64  # embedding width (768 at paper scale)
    n_layers: int = 2  # 12 at paper scale
    n_heads: int = 4
    n_tokens: int = 20
    vocab_size: int = 0  # filled in once the vocabulary is known
    freeze: bool = False

    def validate(self):
        if self.width % self.n_heads != 0:
            raise ContractError("width must be divisible by n_heads")
        if self.n_tokens < 3:
            raise ContractError("n_tokens must leave room for [Loc], a word and [sep]")


def tokenize(annotation: Union[ExpressionAnnotation, str], vocab: Vocabulary, n_tokens: int) -> TokenSequence:
    """Lowercase, split on whitespace/punctuation, map OOV to [UNK]."""
    text = annotation.text if isinstance(annotation, ExpressionAnnotation) else annotation
    toks = words(text)[: n_tokens - 2]
    ids = [vocab.loc_id] + [vocab.token_to_id.get(t, vocab.unk_id) for t in toks] + [vocab.sep_id]
    mask = [True] * len(ids)
    while len(ids) < n_tokens:
        ids.append(vocab.pad_id)
        mask.append(False)
    seq = TokenSequence(ids=np.asarray(ids, dtype=np.int64), mask=np.asarray(mask, dtype=bool), n_tokens=n_tokens)
    seq.validate(vocab)
    return seq


def collate_tokens(seqs: list[TokenSequence], device=None) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.from_numpy(np.stack([s.ids for s in seqs]))
    mask = torch.from_numpy(np.stack([s.mask for s in seqs]))
    if device is not None:
        ids, mask = ids.to(device), mask.to(device)
    return ids, mask


class LanguageEncoder(nn.Module):
    """Embedding table + learned positions + pre-norm transformer stack."""

    def __init__(self, cfg: LangEncoderConfig):
        super().__init__()
        cfg.validate()
        if cfg.vocab_size < len(SPECIALS):
            raise ContractError("vocab_size must cover the special tokens")
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.width)
        nn.init.trunc_normal_(self.embed.weight, std=0.02)
        self.positions = learned_positions(cfg.n_tokens, cfg.width)
        self.stack = TransformerStack(cfg.width, cfg.n_layers, cfg.n_heads)
        if cfg.freeze:
            self.requires_grad_(False)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, N) ids + (B, N) mask -> embeddings of shape (B, width, N)."""
        if ids.shape[-1] != self.cfg.n_tokens:
            raise ContractError(f"expected {self.cfg.n_tokens} tokens, got {ids.shape[-1]}")
        if ids.shape != mask.shape:
            raise ContractError("ids and mask shapes differ")
        x = self.embed(ids) + self.positions.to(self.embed.weight.dtype)
        x = self.stack(x, attend_mask=mask)
        return x.transpose(1, 2)
