"""PatchGAN image and video discriminators conditioned on the first frame."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError

SCORE_EPS = 1e-7


def _n_down(size: int) -> int:
    # stride-2 stages until a 2x2 patch map
    return max(1, int(round(math.log2(size))) - 1)


class ImageDiscriminator(nn.Module):
    """6-channel input (first frame, candidate frame) -> per-patch sigmoid scores.

    Each stride-2 4x4 conv (padding 1) halves the side, so a 16x16 input with
    three stages yields a 2x2 score map.
    """

    def __init__(self, channels: int = 32, size: int = 32, n_down: int | None = None):
        super().__init__()
        n_down = _n_down(size) if n_down is None else n_down
        self.size = size
        layers, ch_in, ch = [], 6, channels
        for k in range(n_down):
            layers.append(nn.Conv2d(ch_in, ch, 4, stride=2, padding=1))
            ch_in, ch = ch, min(ch * 2, 4 * channels)
        self.convs = nn.ModuleList(layers)
        self.out = nn.Conv2d(ch_in, 1, 3, padding=1)

    def forward(self, x1: torch.Tensor, xn: torch.Tensor):
        """Returns (score map (B, 1, h, w), per-sample mean score (B,))."""
        if x1.shape != xn.shape or x1.dim() != 4 or x1.shape[1] != 3:
            raise ValidationError(f"image_disc shape mismatch: {tuple(x1.shape)} vs {tuple(xn.shape)}")
        x = torch.cat([x1, xn], dim=1)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        scores = torch.sigmoid(self.out(x))
        return scores, scores.flatten(1).mean(1)


def tile_first_frame(x1: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
    """Build the (B, 6, T, H, W) video-discriminator input from x1 (B,3,H,W)
    and frames (B, T, 3, H, W); channels 0-2 carry x1 at every time index."""
    if frames.dim() != 5 or frames.shape[2:] != x1.shape[1:] or frames.shape[0] != x1.shape[0]:
        raise ValidationError(f"video_disc shape mismatch: x1 {tuple(x1.shape)}, frames {tuple(frames.shape)}")
    vid = frames.transpose(1, 2)  # B, 3, T, H, W
    cond = x1.unsqueeze(2).expand_as(vid)
    return torch.cat([cond, vid], dim=1)


class VideoDiscriminator(nn.Module):
    """3D PatchGAN over (first frame tiled in time) concat (frames 2..N)."""

    def __init__(self, channels: int = 32, size: int = 32, n_down: int | None = None,
                 temporal_stride: int = 2):
        super().__init__()
        n_down = _n_down(size) if n_down is None else n_down
        layers, ch_in, ch = [], 6, channels
        for _ in range(n_down):
            layers.append(nn.Conv3d(ch_in, ch, (3, 4, 4), stride=(temporal_stride, 2, 2), padding=1))
            ch_in, ch = ch, min(ch * 2, 4 * channels)
        self.convs = nn.ModuleList(layers)
        self.out = nn.Conv3d(ch_in, 1, 3, padding=1)

    def forward(self, x1: torch.Tensor, frames: torch.Tensor):
        x = tile_first_frame(x1, frames)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        scores = torch.sigmoid(self.out(x))
        return scores, scores.flatten(1).mean(1)


def clamp_score(s: torch.Tensor) -> torch.Tensor:
    return s.clamp(SCORE_EPS, 1 - SCORE_EPS)
