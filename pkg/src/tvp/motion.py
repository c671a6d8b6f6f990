"""First-frame inversion and recurrent latent-residual rollout in W+."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ValidationError


class Inverter(nn.Module):
    """Convolutional encoder H x W x 3 -> W+ code (L, d_w).

    Each code row is layer-normalised (no affine) and scaled by
    ``code_scale``, which keeps frame-to-frame code differences inside the
    (-1, 1) range of an LSTM hidden state. The first three blocks double as a frozen feature trunk for the
    perceptual loss once pretraining is done (see ``trunk_taps``).
    """

    def __init__(self, n_layers: int = 4, d_w: int = 64, channels: int = 32, size: int = 32,
                 code_scale: float = 1.0):
        super().__init__()
        self.code_scale = code_scale
        n_down = int(round(math.log2(size / 4)))
        if 4 * 2**n_down != size or n_down < 1:
            raise ConfigError(f"inverter size must be 4 * 2^k (k >= 1), got {size}")
        self.n_layers, self.d_w, self.size = n_layers, d_w, size
        blocks = [nn.Conv2d(3, channels, 3, padding=1)]
        ch = channels
        for _ in range(n_down):
            nxt = min(ch * 2, 4 * channels)
            blocks.append(nn.Conv2d(ch, nxt, 3, stride=2, padding=1))
            ch = nxt
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(ch * 16, n_layers * d_w)

    def _check(self, x):
        if x.dim() != 4 or x.shape[1:] != (3, self.size, self.size):
            raise ValidationError(f"inverter expects (B, 3, {self.size}, {self.size}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        for blk in self.blocks:
            x = F.leaky_relu(blk(x), 0.2)
        w = self.head(x.flatten(1)).view(-1, self.n_layers, self.d_w)
        return self.code_scale * F.layer_norm(w, (self.d_w,))

    def trunk_taps(self, x: torch.Tensor, n_taps: int = 3) -> list[torch.Tensor]:
        taps = []
        for blk in self.blocks[:n_taps]:
            x = F.leaky_relu(blk(x), 0.2)
            taps.append(x)
        return taps


def invert_first_frame(
    x1: torch.Tensor,
    inverter: Inverter | None = None,
    generator: nn.Module | None = None,
    optimize_steps: int = 0,
    lr: float = 0.05,
    feature_extractor=None,
    perc_weight: float = 1.0,
    seed: int = 0,
) -> torch.Tensor:
    """Map frames (B, 3, H, W) in [-1, 1] to W+ codes (B, L, d_w).

    With ``optimize_steps > 0`` the encoder output (or zeros, or a seeded
    small random start when no encoder is given) is refined by Adam on
    reconstruction MSE plus perceptual distance through ``generator``.
    """
    if inverter is not None:
        inverter._check(x1)
        with torch.no_grad():
            w = inverter(x1)
    else:
        if generator is None:
            raise ValidationError("need an inverter or a generator to invert a frame")
        size = generator.size
        if x1.dim() != 4 or x1.shape[1:] != (3, size, size):
            raise ValidationError(f"frame shape {tuple(x1.shape)} does not match generator {size}x{size}")
        g = torch.Generator().manual_seed(seed)
        w = 0.01 * torch.randn(x1.shape[0], generator.n_layers, generator.d_w, generator=g, dtype=x1.dtype)
    if optimize_steps <= 0:
        return w
    if generator is None:
        raise ValidationError("optimization fallback needs a generator")
    w = w.clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=lr)
    target = x1.detach()
    for _ in range(optimize_steps):
        x_hat = generator(w)
        loss = F.mse_loss(x_hat, target)
        if feature_extractor is not None and perc_weight:
            from .objectives import perceptual_loss

            loss = loss + perc_weight * perceptual_loss(target, x_hat, feature_extractor)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return w.detach()


def _lstm_cell(input_size: int, hidden_size: int) -> nn.LSTMCell:
    cell = nn.LSTMCell(input_size, hidden_size)
    with torch.no_grad():
        # input weights scaled by fan-in (torch's default uses the hidden size
        # for both matrices, which mutes a small conditioning vector)
        bound = 1.0 / math.sqrt(input_size)
        cell.weight_ih.uniform_(-bound, bound)
        # gate order i, f, g, o
        cell.bias_ih[hidden_size : 2 * hidden_size].fill_(1.0)
        cell.bias_hh[hidden_size : 2 * hidden_size].zero_()
    return cell


class MotionPredictor(nn.Module):
    """Two separate LSTM cells: ``init_cell`` reads the flattened first-frame
    code once from a zero state; ``cell`` consumes one conditioning vector per
    predicted frame. Hidden size is L * d_w, so each hidden state is a W+
    residual."""

    def __init__(self, n_layers: int, d_w: int, input_dim: int):
        super().__init__()
        self.n_layers, self.d_w, self.input_dim = n_layers, d_w, input_dim
        self.hidden = n_layers * d_w
        self.init_cell = _lstm_cell(self.hidden, self.hidden)
        self.cell = _lstm_cell(input_dim, self.hidden)

    def init_state(self, w1: torch.Tensor):
        if w1.dim() != 3 or w1.shape[1:] != (self.n_layers, self.d_w):
            raise ValidationError(f"w1 must be (B, {self.n_layers}, {self.d_w}), got {tuple(w1.shape)}")
        return self.init_cell(w1.flatten(1))

    def step(self, t: torch.Tensor, state):
        if t.dim() != 2 or t.shape[1] != self.input_dim:
            raise ValidationError(f"step input must be (B, {self.input_dim}), got {tuple(t.shape)}")
        h, c = state
        if h.shape[-1] != self.hidden or c.shape != h.shape:
            raise ValidationError("motion state shape mismatch")
        return self.cell(t, (h, c))

    def accumulate(self, w_prev: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return accumulate(w_prev, h)

    def rollout(self, w1: torch.Tensor, steps: torch.Tensor | None = None, feed_previous: bool = False,
                return_residuals: bool = False):
        """Produce codes w_2..w_N as (B, N-1, L, d_w).

        ``steps`` is (B, N-1, input_dim). With ``feed_previous`` the input at
        each step is the flattened previous code instead, and ``steps`` only
        fixes the horizon (an int count is also accepted).
        """
        if feed_previous:
            horizon = steps if isinstance(steps, int) else steps.shape[1]
        else:
            if steps is None or steps.dim() != 3:
                raise ValidationError("steps must be (B, N-1, d_t)")
            horizon = steps.shape[1]
        state = self.init_state(w1)
        w, codes, residuals = w1, [], []
        for k in range(horizon):
            inp = w.flatten(1) if feed_previous else steps[:, k]
            state = self.step(inp, state)
            residuals.append(state[0])
            w = accumulate(w, state[0])
            codes.append(w)
        codes = torch.stack(codes, 1)
        if return_residuals:
            return codes, torch.stack(residuals, 1)
        return codes


def accumulate(w_prev: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """w_n = w_{n-1} + h_n, with h given flat (..., L*d_w) or shaped like w."""
    if h.shape != w_prev.shape:
        if h.shape[-1] != w_prev.shape[-1] * w_prev.shape[-2] or h.shape[:-1] != w_prev.shape[:-2]:
            raise ValidationError(f"residual {tuple(h.shape)} does not match code {tuple(w_prev.shape)}")
        h = h.reshape(w_prev.shape)
    return w_prev + h
