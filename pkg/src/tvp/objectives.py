"""Generator and discriminator training objectives."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .config import LossWeights
from .discriminators import clamp_score
from .errors import FormatError, NumericError, ValidationError


class FeatureExtractor(nn.Module):
    """Frozen conv stack; ``forward`` returns the taps ordered shallow to deep.

    A stack with no layers has a single identity tap.
    """

    def __init__(self, convs: list[nn.Conv2d], slope: float = 0.2):
        super().__init__()
        self.convs = nn.ModuleList(convs)
        self.slope = slope
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if not len(self.convs):
            return [x]
        taps = []
        for conv in self.convs:
            x = conv(x)
            if self.slope is not None:
                x = F.leaky_relu(x, self.slope)
            taps.append(x)
        return taps

    @classmethod
    def identity(cls):
        return cls([])

    @classmethod
    def random(cls, channels: int = 16, n_taps: int = 3, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        convs, ch_in = [], 3
        for k in range(n_taps):
            conv = nn.Conv2d(ch_in, channels, 3, stride=1 if k == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / math.sqrt(ch_in * 9))
                conv.bias.zero_()
            convs.append(conv)
            ch_in = channels
        return cls(convs)

    @classmethod
    def from_inverter(cls, inverter, n_taps: int = 3):
        """Copy the first ``n_taps`` blocks of a trained inversion encoder."""
        convs = []
        for blk in inverter.blocks[:n_taps]:
            conv = nn.Conv2d(blk.in_channels, blk.out_channels, blk.kernel_size, stride=blk.stride, padding=blk.padding)
            conv.load_state_dict(blk.state_dict())
            convs.append(conv)
        return cls(convs)

    # binary file: uint32 P, then per layer uint32 {out, in, kh, kw, stride,
    # padding} followed by float32 weights (row-major) and float32 bias
    def save(self, path: str | Path):
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(self.convs)))
            for conv in self.convs:
                o, i, kh, kw = conv.weight.shape
                fh.write(struct.pack("<6I", o, i, kh, kw, conv.stride[0], conv.padding[0]))
                fh.write(conv.weight.detach().float().numpy().astype("<f4").tobytes())
                fh.write(conv.bias.detach().float().numpy().astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path, slope: float = 0.2):
        import numpy as np

        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read feature extractor {path}: {exc}") from exc
        try:
            (P,), off = struct.unpack_from("<I", blob, 0), 4
            convs, prev_out = [], 3
            for _ in range(P):
                o, i, kh, kw, stride, pad = struct.unpack_from("<6I", blob, off)
                off += 24
                if i != prev_out:
                    raise FormatError(f"layer input channels {i} do not match previous output {prev_out}")
                nw = o * i * kh * kw
                w = np.frombuffer(blob, "<f4", nw, off).reshape(o, i, kh, kw)
                off += 4 * nw
                b = np.frombuffer(blob, "<f4", o, off)
                off += 4 * o
                conv = nn.Conv2d(i, o, (kh, kw), stride=stride, padding=pad)
                with torch.no_grad():
                    conv.weight.copy_(torch.from_numpy(w.copy()))
                    conv.bias.copy_(torch.from_numpy(b.copy()))
                convs.append(conv)
                prev_out = o
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated feature extractor file {path}") from exc
        if off != len(blob):
            raise FormatError(f"trailing bytes in feature extractor file {path}")
        return cls(convs, slope)


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(v: torch.Tensor, v_hat: torch.Tensor) -> torch.Tensor:
    """Per-element mean of the squared difference."""
    _check_same(v, v_hat, "mse_loss")
    return (v - v_hat).pow(2).mean()


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, fx: FeatureExtractor) -> torch.Tensor:
    """Sum over taps of mean |feature difference| (normalized by C*H*W),
    averaged over frames and batch. Accepts (B, 3, H, W) or (B, T, 3, H, W)."""
    _check_same(x, x_hat, "perceptual_loss")
    if x.dim() == 5:
        x, x_hat = x.flatten(0, 1), x_hat.flatten(0, 1)
    if x.dim() != 4:
        raise ValidationError(f"perceptual_loss expects frames or videos, got {tuple(x.shape)}")
    total = x.new_zeros(())
    for a, b in zip(fx(x), fx(x_hat)):
        total = total + (a - b).abs().flatten(1).mean(1).mean()
    return total


def adv_loss(score: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term -log D, averaged over the batch."""
    return -torch.log(clamp_score(score)).mean()


def adv_generator_losses(d_score_img: torch.Tensor, d_score_vid: torch.Tensor):
    return adv_loss(d_score_img), adv_loss(d_score_vid)


def disc_loss(real_score: torch.Tensor, fake_score: torch.Tensor) -> torch.Tensor:
    """-[log D(real) + log(1 - D(fake))], averaged over the batch."""
    return -(torch.log(clamp_score(real_score)) + torch.log(1 - clamp_score(fake_score))).mean()


discriminator_loss = disc_loss

TERMS = ("mse", "perc", "adv2d", "adv3d")


@dataclass
class LossBreakdown:
    mse: torch.Tensor
    perc: torch.Tensor
    adv2d: torch.Tensor
    adv3d: torch.Tensor
    total: torch.Tensor
    weighted: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in TERMS + ("total",)}
        out.update({f"w_{k}": float(v) for k, v in self.weighted.items()})
        return out


def total_generator_loss(terms: dict, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the four generator terms (adversarial terms already in
    -log D form)."""
    vals = {}
    for k in TERMS:
        t = terms.get(k, 0.0)
        t = t if torch.is_tensor(t) else torch.tensor(float(t), dtype=torch.float64)
        if not torch.isfinite(t).all():
            raise NumericError(f"generator loss term {k!r} is not finite: {t}")
        vals[k] = t
    weighted = {k: getattr(weights, k) * vals[k] for k in TERMS}
    total = weighted["mse"] + weighted["perc"] + weighted["adv2d"] + weighted["adv3d"]
    return LossBreakdown(vals["mse"], vals["perc"], vals["adv2d"], vals["adv3d"], total,
                         {k: v.detach() for k, v in weighted.items()})
