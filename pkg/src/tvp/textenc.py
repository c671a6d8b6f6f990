"""Small trainable caption encoder producing word and sentence embeddings.

Stands in for a pretrained language encoder: same outputs (per-token vectors,
the [CLS] vector, validity mask), and externally computed embeddings can be
imported from a binary file instead.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError, ValidationError


@dataclass
class WordEmbeddings:
    u: torch.Tensor  # (B, M, d_u), zero at masked-out rows
    mask: torch.Tensor  # (B, M) bool

    @property
    def u_cls(self) -> torch.Tensor:
        return self.u[:, 0]


class _Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_padding_mask=~mask, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Token + learned position embeddings, then ``depth`` pre-LN attention
    blocks closed by a LayerNorm (so outputs are unit-scale per token, like a
    BERT-style encoder's last layer). Depth 0 is a bare lookup."""

    def __init__(self, vocab_size: int, max_len: int = 40, d_u: int = 32, depth: int = 1, heads: int = 2,
                 out_norm: bool = True):
        super().__init__()
        if depth not in (0, 1, 2):
            raise ValidationError(f"text encoder depth must be 0-2, got {depth}")
        self.vocab_size, self.max_len, self.d_u = vocab_size, max_len, d_u
        self.tok = nn.Embedding(vocab_size, d_u)
        self.pos = nn.Embedding(max_len, d_u)
        nn.init.normal_(self.tok.weight, std=0.5)
        nn.init.normal_(self.pos.weight, std=0.1)
        self.blocks = nn.ModuleList(_Block(d_u, heads) for _ in range(depth))
        self.out_norm = nn.LayerNorm(d_u) if depth and out_norm else None

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> WordEmbeddings:
        if ids.dim() == 1:
            ids, mask = ids[None], mask[None]
        if ids.shape[1] != self.max_len or mask.shape != ids.shape:
            raise ValidationError(f"token ids must be (B, {self.max_len}), got {tuple(ids.shape)}")
        if (ids < 0).any() or (ids >= self.vocab_size).any():
            raise ValidationError(f"token id out of range for vocabulary of {self.vocab_size}")
        mask = mask.bool()
        x = self.tok(ids) + self.pos.weight[None]
        for blk in self.blocks:
            x = blk(x, mask)
        if self.out_norm is not None:
            x = self.out_norm(x)
        return WordEmbeddings(x * mask[..., None].to(x.dtype), mask)


def encode_text(tokens, encoder: TextEncoder) -> WordEmbeddings:
    """Encode a TokenizedCaption (or stacked arrays of ids and masks)."""
    ids = torch.as_tensor(np.asarray(tokens.ids), dtype=torch.long)
    mask = torch.as_tensor(np.asarray(tokens.mask), dtype=torch.bool)
    return encoder(ids, mask)


# external file: little-endian uint32 M, uint32 d_u, float32[M*d_u] row-major, uint8[M] mask


def save_external_embeddings(path: str | Path, u: np.ndarray, mask: np.ndarray):
    u = np.asarray(u, dtype="<f4")
    M, d_u = u.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", M, d_u))
        fh.write(u.tobytes())
        fh.write(np.asarray(mask, dtype=np.uint8).tobytes())


def import_external_embeddings(path: str | Path, M: int | None = None, d_u: int | None = None) -> WordEmbeddings:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read embeddings {path}: {exc}") from exc
    if len(blob) < 8:
        raise FormatError("embedding file too short for header")
    fM, fd = struct.unpack_from("<II", blob, 0)
    if (M is not None and fM != M) or (d_u is not None and fd != d_u):
        raise FormatError(f"embedding file is {fM}x{fd}, config expects {M}x{d_u}")
    expected = 8 + 4 * fM * fd + fM
    if len(blob) != expected:
        raise FormatError(f"embedding file has {len(blob)} bytes, expected {expected}")
    u = np.frombuffer(blob, "<f4", fM * fd, 8).reshape(fM, fd).astype(np.float32)
    mask = np.frombuffer(blob, np.uint8, fM, 8 + 4 * fM * fd)
    if not set(np.unique(mask)) <= {0, 1}:
        raise FormatError("mask bytes must be 0 or 1")
    mask = mask.astype(bool)
    if not mask[0] or np.any(np.diff(mask.astype(np.int8)) > 0):
        raise ValidationError("mask must be a prefix of trues starting at position 0")
    if np.any(u[~mask] != 0):
        raise ValidationError("padded rows of imported embeddings must be zero")
    if not np.isfinite(u).all():
        raise ValidationError("imported embeddings contain non-finite values")
    return WordEmbeddings(torch.from_numpy(u)[None], torch.from_numpy(mask)[None])
