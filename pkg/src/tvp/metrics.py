"""Frame-level MSE / PSNR / SSIM (and optional LPIPS) in the 8-bit domain."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import ClipArrays, to_uint8
from .errors import ConfigError, ValidationError

PSNR_CAP = 100.0
SSIM_WIN, SSIM_SIGMA, SSIM_K1, SSIM_K2, DATA_RANGE = 11, 1.5, 0.01, 0.03, 255.0
COLUMNS = (("mse", "↓"), ("ssim", "↑"), ("psnr", "↑"), ("lpips", "↓"))


def _pair(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def frame_mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def psnr(x, y) -> float:
    return psnr_from_mse(frame_mse(x, y))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    c1, c2 = (SSIM_K1 * DATA_RANGE) ** 2, (SSIM_K2 * DATA_RANGE) ** 2

    def filt(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, win.shape), win)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(x, y) -> float:
    """Gaussian-window SSIM over valid window positions, averaged over channels.

    x, y: (H, W) or (H, W, C) arrays on the 0-255 scale.
    """
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < SSIM_WIN:
        raise ValidationError(f"image {x.shape[:2]} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    win = gaussian_window()
    return float(np.mean([_ssim_channel(x[..., c], y[..., c], win) for c in range(x.shape[-1])]))


def lpips(x, y, backbone=None, lin_weights: list | None = None) -> float:
    """Learned-perceptual distance with a caller-supplied feature backbone.

    Features are unit-normalized over channels at every tap; squared
    differences are (optionally) channel-weighted, averaged spatially and
    summed over taps.
    """
    if backbone is None:
        raise ConfigError("LPIPS requested but no backbone weights were provided")
    x, y = _pair(x, y)

    def prep(a):
        t = torch.from_numpy(a / 127.5 - 1.0).float()
        return t.permute(2, 0, 1)[None] if t.dim() == 3 else t.permute(0, 3, 1, 2)

    total = 0.0
    with torch.no_grad():
        for k, (fa, fb) in enumerate(zip(backbone(prep(x)), backbone(prep(y)))):
            na = fa / (fa.pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
            nb = fb / (fb.pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
            d = (na - nb).pow(2)
            if lin_weights is not None:
                d = d * torch.as_tensor(lin_weights[k], dtype=d.dtype).view(1, -1, 1, 1)
            total += float(d.sum(1).mean())
    return total


@dataclass
class MetricsReport:
    label: str
    frame_range: tuple[int, int]  # 1-based inclusive
    per_clip: list = field(default_factory=list)  # per clip: list of per-frame dicts
    domain: str = "uint8"

    @property
    def metric_names(self) -> list[str]:
        if not self.per_clip or not self.per_clip[0]:
            return []
        return [k for k, _ in COLUMNS if k in self.per_clip[0][0]]

    def aggregates(self) -> dict:
        """Mean over frames within each clip, then over clips."""
        out = {}
        for name in self.metric_names:
            clip_means = [float(np.mean([f[name] for f in frames])) for frames in self.per_clip]
            out[name] = float(np.mean(clip_means))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregates"] = self.aggregates()
        d["frame_range"] = list(self.frame_range)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def format_table(reports: dict[str, MetricsReport] | list[MetricsReport]) -> str:
    """Aligned text table: MSE, SSIM, PSNR, LPIPS columns with direction markers."""
    if isinstance(reports, dict):
        rows = list(reports.items())
    else:
        rows = [(r.label, r) for r in reports]
    header = ["Method"] + [f"{k.upper()}{arrow}" for k, arrow in COLUMNS]
    lines = []
    for name, rep in rows:
        agg = rep.aggregates()
        cells = [name]
        for k, _ in COLUMNS:
            if k not in agg:
                cells.append("-")
            elif k == "mse":
                cells.append(f"{agg[k]:.1f}")
            elif k == "psnr":
                cells.append(f"{agg[k]:.3f}")
            else:
                cells.append(f"{agg[k]:.3f}")
        lines.append(cells)
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    ranges = {tuple(rep.frame_range) for _, rep in rows}
    foot = ", ".join(f"frames {a}..{b}" for a, b in sorted(ranges))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines] + [f"({foot}, 8-bit)"])


PredictFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def assembly_predictor(model, noise_seed: int = 0, batch: int = 32) -> PredictFn:
    """Wrap a trained ModelAssembly as uint8 clip in -> uint8 clip out.

    The returned array holds x1_hat followed by predicted frames 2..N.
    NVP noise comes from a fixed-seed generator so evaluation is deterministic.
    """
    noise = torch.Generator().manual_seed(noise_seed)

    def predict(frames_u8, ids, mask):
        outs = []
        with torch.no_grad():
            for k in range(0, len(frames_u8), batch):
                x1 = torch.from_numpy(frames_u8[k : k + batch, 0]).permute(0, 3, 1, 2).float() / 127.5 - 1.0
                x1_hat, pred, _ = model.predict(
                    x1, torch.from_numpy(ids[k : k + batch]), torch.from_numpy(mask[k : k + batch]), noise
                )
                clip = torch.cat([x1_hat[:, None], pred], 1).permute(0, 1, 3, 4, 2).numpy()
                outs.append(to_uint8(clip))
        return np.concatenate(outs)

    return predict


def evaluate(predict: PredictFn, data: ClipArrays, include_first: bool = False, label: str = "",
             lpips_backbone=None) -> MetricsReport:
    """Score predictions per frame in the chosen range (default frames 2..N)."""
    N = data.frames.shape[1]
    pred = predict(data.frames, data.ids, data.mask)
    if pred.shape != data.frames.shape:
        raise ValidationError(f"predictions {pred.shape} do not match data {data.frames.shape}")
    first = 1 if include_first else 2
    report = MetricsReport(label, (first, N))
    for gt_clip, pr_clip in zip(data.frames, pred):
        frames = []
        for n in range(first - 1, N):
            m = frame_mse(gt_clip[n], pr_clip[n])
            rec = {"mse": m, "ssim": ssim(gt_clip[n], pr_clip[n]), "psnr": psnr_from_mse(m)}
            if lpips_backbone is not None:
                rec["lpips"] = lpips(gt_clip[n], pr_clip[n], lpips_backbone)
            frames.append(rec)
        report.per_clip.append(frames)
    return report
