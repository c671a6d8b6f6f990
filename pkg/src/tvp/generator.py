"""Style-based frame generator driven by W+ codes through AdaIN.

No mapping network and no noise injection: the generator only ever sees W+
codes (one row per layer) and is a deterministic function of them.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

ADAIN_EPS = 1e-5


def modulate(x: torch.Tensor, y_s: torch.Tensor, y_b: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """AdaIN: per-channel spatial standardization, then style scale and bias.

    x: (B, C, h, w); y_s, y_b: (B, C). Uses population std.
    """
    if x.dim() != 4 or y_s.shape != x.shape[:2] or y_b.shape != x.shape[:2]:
        raise ValidationError(f"modulate shape mismatch: x {tuple(x.shape)}, y_s {tuple(y_s.shape)}, y_b {tuple(y_b.shape)}")
    # shift by one sample first so a constant channel centres to exactly zero
    d = x - x[:, :, :1, :1].detach()
    d = d - d.mean(dim=(2, 3), keepdim=True)
    sigma = d.pow(2).mean(dim=(2, 3), keepdim=True).sqrt()
    return y_s[..., None, None] * d / (sigma + eps) + y_b[..., None, None]


class AdaIN(nn.Module):
    def __init__(self, d_w: int, channels: int):
        super().__init__()
        self.channels = channels
        self.affine = nn.Linear(d_w, 2 * channels)
        nn.init.normal_(self.affine.weight, std=1.0 / math.sqrt(d_w))
        with torch.no_grad():
            self.affine.bias[:channels].fill_(1.0)
            self.affine.bias[channels:].zero_()

    def styles(self, w_row: torch.Tensor):
        ys, yb = self.affine(w_row).split(self.channels, dim=-1)
        return ys, yb

    def forward(self, x, w_row):
        ys, yb = self.styles(w_row)
        return modulate(x, ys, yb)


class SynthesisLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, d_w: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.adain = AdaIN(d_w, out_ch)

    def forward(self, x, w_row, taps: list | None = None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x)
        if taps is not None:
            taps.append(x)
        return F.leaky_relu(self.adain(x, w_row), 0.2)


class StyleGenerator(nn.Module):
    """Learned 4x4 constant, then L x {optional 2x upsample, 3x3 conv, AdaIN,
    leaky ReLU}, then a 1x1 conv with tanh to RGB in [-1, 1]."""

    def __init__(self, n_layers: int = 4, d_w: int = 64, channels: int = 64, size: int = 32):
        super().__init__()
        n_up = int(round(math.log2(size / 4)))
        if 4 * 2**n_up != size:
            raise ConfigError(f"image size must be 4 * 2^k, got {size}")
        if n_layers < n_up:
            raise ConfigError(f"{n_layers} layers cannot reach {size}px from 4x4 (need >= {n_up})")
        self.n_layers, self.d_w, self.size = n_layers, d_w, size
        self.const = nn.Parameter(torch.randn(1, channels, 4, 4))
        first_up = n_layers - n_up
        self.layers = nn.ModuleList(
            SynthesisLayer(channels, channels, d_w, upsample=k >= first_up) for k in range(n_layers)
        )
        self.to_rgb = nn.Conv2d(channels, 3, 1)
        self.frozen = False

    def forward(self, w: torch.Tensor, taps: list | None = None) -> torch.Tensor:
        """w: (B, L, d_w) -> frames (B, 3, H, W). ``taps`` collects each
        layer's pre-modulation activations when a list is passed."""
        if w.dim() != 3 or w.shape[1] != self.n_layers or w.shape[2] != self.d_w:
            raise ValidationError(f"expected W+ code (B, {self.n_layers}, {self.d_w}), got {tuple(w.shape)}")
        x = self.const.expand(w.shape[0], -1, -1, -1)
        for k, layer in enumerate(self.layers):
            x = layer(x, w[:, k], taps)
        return torch.tanh(self.to_rgb(x))

    synthesize = forward


def param_digest(module: nn.Module) -> str:
    """SHA-256 over a canonical little-endian serialization of every
    parameter and buffer, in declaration order."""
    h = hashlib.sha256()
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        arr = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(np.asarray(arr.shape, dtype="<i8").tobytes())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    """Mark all parameters read-only; optimizers built through
    :func:`tvp.trainer.make_optimizer` refuse them."""
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
        p._tvp_frozen = True
    module.frozen = True
    return module


def is_frozen(p: torch.Tensor) -> bool:
    return bool(getattr(p, "_tvp_frozen", False))


@dataclass
class PretrainResult:
    generator: StyleGenerator
    inverter: nn.Module
    recon_mse: float
    digest: str
    converged: bool
    history: list


def pretrain_generator(frames: np.ndarray, held_out: np.ndarray, model_cfg, cfg, progress=None) -> PretrainResult:
    """Jointly fit generator and inversion encoder on individual frames.

    frames/held_out: uint8 arrays (n, H, W, 3). Objective per batch:
    MSE(G(E(x)), x) + perc_weight * perceptual + adv_weight * non-saturating
    adversarial term from a frame-conditioned image discriminator.
    """
    from .discriminators import ImageDiscriminator
    from .motion import Inverter
    from .objectives import FeatureExtractor, perceptual_loss, adv_loss, disc_loss

    if len(frames) == 0:
        raise ValidationError("pretraining needs at least one frame")
    torch.manual_seed(cfg.seed)
    gen = StyleGenerator(model_cfg.n_layers, model_cfg.d_w, model_cfg.gen_channels, model_cfg.height)
    inv = Inverter(model_cfg.n_layers, model_cfg.d_w, model_cfg.inv_channels, model_cfg.height)
    disc = ImageDiscriminator(model_cfg.disc_channels, model_cfg.height)
    feats = FeatureExtractor.random(channels=16, seed=cfg.seed)
    opt_g = torch.optim.Adam(list(gen.parameters()) + list(inv.parameters()), lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    rng = np.random.default_rng(cfg.seed)
    x_all = torch.from_numpy(frames).permute(0, 3, 1, 2).float() / 127.5 - 1.0
    history = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(x_all), size=cfg.batch_size)
        x = x_all[idx]
        x_hat = gen(inv(x))
        loss = F.mse_loss(x_hat, x)
        if cfg.perc_weight:
            loss = loss + cfg.perc_weight * perceptual_loss(x, x_hat, feats)
        if cfg.adv_weight:
            _, score = disc(x, x_hat)
            loss = loss + cfg.adv_weight * adv_loss(score)
        opt_g.zero_grad(set_to_none=True)
        loss.backward()
        opt_g.step()
        if cfg.adv_weight:
            _, real = disc(x, x)
            _, fake = disc(x, x_hat.detach())
            d_loss = disc_loss(real, fake)
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
        history.append(loss.item())
        if progress and step % 100 == 0:
            progress(step, history[-1])
    recon = reconstruction_mse(gen, inv, held_out)
    converged = recon < cfg.recon_threshold
    if not converged:
        log.warning("generator pretraining did not reach threshold: %.4f >= %.4f", recon, cfg.recon_threshold)
    freeze(gen)
    freeze(inv)
    return PretrainResult(gen, inv, recon, param_digest(gen), converged, history)


@torch.no_grad()
def reconstruction_mse(gen: nn.Module, inv: nn.Module, frames: np.ndarray, batch: int = 256) -> float:
    """Mean squared reconstruction error in [-1, 1] units."""
    if len(frames) == 0:
        return float("nan")
    total, count = 0.0, 0
    for k in range(0, len(frames), batch):
        x = torch.from_numpy(frames[k : k + batch]).permute(0, 3, 1, 2).float() / 127.5 - 1.0
        total += F.mse_loss(gen(inv(x)), x, reduction="sum").item()
        count += x.numel()
    return total / count
