"""Text inference: per-step attention over words, fusion, CLS refinement."""
from __future__ import annotations

import torch
from torch import nn

from .errors import ValidationError


def step_attention(u: torch.Tensor, mask: torch.Tensor, w_step: torch.Tensor) -> torch.Tensor:
    """Softmax over words of the scalar logits ``u_j . w_step``.

    u: (..., M, d_u); mask: (..., M); w_step: (d_u,) or (..., S, d_u) for S
    steps at once, giving (..., S, M). Masked-out words get exactly 0.
    """
    mask = mask.bool()
    if not mask.any(-1).all():
        raise ValidationError("step_attention needs at least one unmasked word")
    if w_step.dim() == 1:
        logits = u @ w_step
        logits = logits.masked_fill(~mask, float("-inf"))
    else:
        logits = w_step @ u.transpose(-1, -2)
        logits = logits.masked_fill(~mask.unsqueeze(-2), float("-inf"))
    return torch.softmax(logits, dim=-1)


def fuse(u: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """f = sum_j alpha_j u_j. u: (..., M, d_u); alpha: (..., M) or (..., S, M)."""
    if alpha.shape[-1] != u.shape[-2]:
        raise ValidationError(f"alpha length {alpha.shape[-1]} does not match {u.shape[-2]} words")
    if alpha.dim() == u.dim() - 1:
        return (alpha.unsqueeze(-1) * u).sum(-2)
    return alpha @ u


class RefineMLP(nn.Module):
    """P: Linear(2 d_u -> d_t), ReLU, Linear(d_t -> d_t) on [f, u_cls]."""

    def __init__(self, d_u: int, d_t: int):
        super().__init__()
        self.d_u = d_u
        self.fc1 = nn.Linear(2 * d_u, d_t)
        self.fc2 = nn.Linear(d_t, d_t)

    def forward(self, f: torch.Tensor, u_cls: torch.Tensor) -> torch.Tensor:
        return refine(f, u_cls, self)


def refine(f: torch.Tensor, u_cls: torch.Tensor, mlp: RefineMLP) -> torch.Tensor:
    if f.shape[-1] != mlp.d_u or u_cls.shape[-1] != mlp.d_u:
        raise ValidationError(f"refine expects d_u={mlp.d_u}, got f {tuple(f.shape)}, u_cls {tuple(u_cls.shape)}")
    if f.dim() > u_cls.dim():
        u_cls = u_cls.unsqueeze(-2).expand(*f.shape[:-1], -1)
    z = torch.cat([f, u_cls], dim=-1)
    return mlp.fc2(torch.relu(mlp.fc1(z)))


class TextInferenceModule(nn.Module):
    """Maps word embeddings to N-1 step embeddings t_2..t_N.

    Step weights start at zero, i.e. uniform attention over real words.
    With ``use_refine=False`` the fusions are returned directly (d_t = d_u).
    """

    def __init__(self, n_frames: int, d_u: int, d_t: int, use_refine: bool = True):
        super().__init__()
        if n_frames < 2:
            raise ValidationError("need n_frames >= 2")
        self.n_steps = n_frames - 1
        self.step_weights = nn.Parameter(torch.zeros(self.n_steps, d_u))
        self.refine = RefineMLP(d_u, d_t) if use_refine else None

    def attention(self, u, mask):
        return step_attention(u, mask, self.step_weights)

    def fusions(self, u, mask):
        """Primary fusions f_2..f_N: (B, N-1, d_u)."""
        return fuse(u, self.attention(u, mask))

    def forward(self, u: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """u: (B, M, d_u) with row 0 the [CLS] vector -> (B, N-1, d_t)."""
        f = self.fusions(u, mask)
        return f if self.refine is None else self.refine(f, u[:, 0])


def infer_steps(words, tim: TextInferenceModule) -> torch.Tensor:
    return tim(words.u, words.mask)
