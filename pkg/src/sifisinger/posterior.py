"""Posterior encoder over ground-truth acoustics, and the KL term tying it to the prior."""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import FrameMisalignment, ShapeMismatch
from .layers import ChannelLayerNorm
from .prior import LatentSequence, reparameterize


@dataclass
class PosteriorConfig:
    hidden_size: int = 192
    n_layers: int = 8
    kernel_size: int = 5
    dropout: float = 0.0
    latent_size: int = 192
    mcep_dims: int = 80


class PosteriorEncoder(nn.Module):
    """[mcep | log-F0 | V/UV] -> stacked (conv, LayerNorm, GELU) blocks -> mean, log-variance."""

    def __init__(self, config: PosteriorConfig = PosteriorConfig()):
        super().__init__()
        c = config
        self.config = c
        self.pre = nn.Conv1d(c.mcep_dims + 2, c.hidden_size, 1)
        self.convs = nn.ModuleList(
            nn.Conv1d(c.hidden_size, c.hidden_size, c.kernel_size, padding=c.kernel_size // 2)
            for _ in range(c.n_layers)
        )
        self.norms = nn.ModuleList(ChannelLayerNorm(c.hidden_size) for _ in range(c.n_layers))
        self.drop = nn.Dropout(c.dropout)
        self.proj = nn.Conv1d(c.hidden_size, 2 * c.latent_size, 1)

    def forward(self, mcep, log_f0, vuv, mask=None, eps=None, noise_scale=1.0) -> LatentSequence:
        T = mcep.shape[1]
        if log_f0.shape[1] != T or vuv.shape[1] != T:
            raise FrameMisalignment("mcep, log_f0 and vuv must share the frame axis")
        if mask is None:
            mask = torch.ones(mcep.shape[:2], dtype=torch.bool, device=mcep.device)
        m = mask.unsqueeze(1).to(mcep.dtype)
        x = torch.cat([mcep, log_f0.unsqueeze(-1), vuv.unsqueeze(-1).to(mcep.dtype)], -1).transpose(1, 2)
        x = self.pre(x) * m
        for conv, norm in zip(self.convs, self.norms):
            y = F.gelu(norm(conv(x * m)))
            x = x + self.drop(y)
        h = (self.proj(x) * m).transpose(1, 2)
        mean, log_var = h.chunk(2, dim=-1)
        return reparameterize(mean, log_var, eps, noise_scale)


def kl_loss(posterior: LatentSequence, prior: LatentSequence, frame_mask=None) -> torch.Tensor:
    """KL(posterior || prior) for diagonal Gaussians, averaged over real frames and dimensions."""
    mq, lq = posterior.mean, posterior.log_var
    mp, lp = prior.mean, prior.log_var
    if mq.shape != mp.shape or lq.shape != lp.shape:
        raise ShapeMismatch(f"posterior {tuple(mq.shape)} vs prior {tuple(mp.shape)}")
    # written so that identical distributions give exactly zero
    kl = 0.5 * (torch.exp(lq - lp) + (mq - mp) ** 2 * torch.exp(-lp) - 1.0 + (lp - lq))
    if frame_mask is None:
        return kl.mean()
    m = frame_mask.unsqueeze(-1).to(kl.dtype)
    return (kl * m).sum() / (m.sum() * kl.shape[-1]).clamp(min=1.0)
