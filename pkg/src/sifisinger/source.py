"""F0-driven sinusoidal excitation with harmonic overtones.

Branch ``b`` oscillates at ``(b + 1) * f0``.  Voiced steps carry
``alpha * sin(phase + phi) + n`` and unvoiced steps carry ``n / (3 * sigma)``
with ``n ~ N(0, sigma^2)``.  A trainable linear layer followed by tanh merges
the branches into one excitation channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NegativeF0, ShapeMismatch


@dataclass
class SourceConfig:
    alpha: float = 0.1
    sigma: float = 0.003
    harmonics: int = 7          # overtone branches on top of the fundamental
    sample_rate: int = 44100

    def __post_init__(self):
        if not (self.alpha > 0 and self.sigma > 0 and self.harmonics >= 0):
            raise ValueError(f"invalid source config: {self}")

    @property
    def n_branches(self):
        return self.harmonics + 1


@dataclass
class ExcitationSignal:
    branches: torch.Tensor        # (B, n_branches, T)
    merged: torch.Tensor | None   # (B, T)
    rate: float


def _make_generator(rng_seed, device):
    if rng_seed is None:
        return None
    g = torch.Generator(device=device)
    g.manual_seed(int(rng_seed))
    return g


def generate_excitation(f0, config: SourceConfig = SourceConfig(), rng_seed=None, random_phase: bool = True,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    """Per-branch excitation for a step-rate F0 track.

    ``f0`` is ``(T,)`` or ``(B, T)`` in Hz at ``config.sample_rate`` steps per
    second.  Returns ``(B, n_branches, T)``.  The phase accumulates over every
    step (unvoiced steps add nothing), so voicing resumes where it left off.
    ``phi`` is drawn once per branch per utterance when ``random_phase``.
    """
    f0 = torch.as_tensor(f0)
    if f0.dim() == 1:
        f0 = f0.unsqueeze(0)
    f0 = f0.detach()
    if torch.any(f0 < 0):
        raise NegativeF0("F0 values must be >= 0")
    if generator is None:
        generator = _make_generator(rng_seed, f0.device)
    dtype = f0.dtype if torch.is_floating_point(f0) else torch.float32
    B, T = f0.shape
    H = config.n_branches

    mult = torch.arange(1, H + 1, dtype=torch.float64, device=f0.device)
    # cumulative cycles in float64, wrapped, to keep long utterances precise
    cycles = torch.cumsum(f0.to(torch.float64) / config.sample_rate, dim=-1)
    cycles = torch.remainder(cycles.unsqueeze(1) * mult[None, :, None], 1.0)
    if random_phase:
        phi = (torch.rand(B, H, 1, generator=generator, dtype=torch.float64, device=f0.device) * 2 - 1) * math.pi
    else:
        phi = torch.zeros(B, H, 1, dtype=torch.float64, device=f0.device)
    sine = config.alpha * torch.sin(2 * math.pi * cycles + phi)

    noise = torch.randn(B, H, T, generator=generator, dtype=torch.float64, device=f0.device) * config.sigma
    voiced = (f0 > 0).unsqueeze(1)
    out = torch.where(voiced, sine + noise, noise / (3 * config.sigma))
    return out.to(dtype)


def merge_branches(branches: torch.Tensor, weight: torch.Tensor, bias=0.0) -> torch.Tensor:
    """``tanh(sum_b w_b * branches[:, b] + bias)`` -> ``(B, T)``."""
    weight = torch.as_tensor(weight, dtype=branches.dtype).reshape(-1)
    if branches.dim() == 2:
        branches = branches.unsqueeze(0)
    if weight.numel() != branches.shape[1]:
        raise ShapeMismatch(f"{weight.numel()} merge weights for {branches.shape[1]} branches")
    return torch.tanh(torch.einsum("bht,h->bt", branches, weight) + bias)


def upsample_f0(frame_f0, hop: int) -> torch.Tensor:
    """Frame-rate F0 to sample rate.

    Sample ``s`` belongs to frame ``s // hop``.  Within a voiced frame the
    value ramps linearly toward the next frame when that frame is voiced too,
    otherwise it holds.  Unvoiced frames give zeros.
    """
    f = torch.as_tensor(frame_f0)
    squeeze = f.dim() == 1
    if squeeze:
        f = f.unsqueeze(0)
    if not torch.is_floating_point(f):
        f = f.float()
    if hop <= 0:
        raise ValueError("hop must be positive")
    nxt = torch.cat([f[:, 1:], f[:, -1:]], dim=1)
    nxt = torch.where((nxt > 0) & (f > 0), nxt, f)
    frac = torch.arange(hop, dtype=f.dtype, device=f.device) / hop
    out = f.unsqueeze(-1) + (nxt - f).unsqueeze(-1) * frac
    out = out.reshape(f.shape[0], -1)
    return out.squeeze(0) if squeeze else out


def pool_to_frames(x: torch.Tensor, hop: int) -> torch.Tensor:
    """Average ``(B, T)`` sample-rate values over non-overlapping ``hop`` windows."""
    return F.avg_pool1d(x.unsqueeze(1), hop, hop).squeeze(1)


class SourceModule(nn.Module):
    """Excitation generator plus its trainable branch merge."""

    def __init__(self, config: SourceConfig = SourceConfig()):
        super().__init__()
        self.config = config
        self.merge = nn.Linear(config.n_branches, 1)

    def excite(self, f0_samples, generator=None, random_phase=None) -> ExcitationSignal:
        if random_phase is None:
            random_phase = self.training
        dtype = self.merge.weight.dtype
        branches = generate_excitation(f0_samples.to(dtype), self.config, random_phase=random_phase,
                                       generator=generator)
        merged = merge_branches(branches, self.merge.weight, self.merge.bias)
        return ExcitationSignal(branches, merged, self.config.sample_rate)

    def forward(self, f0_samples, generator=None, random_phase=None) -> torch.Tensor:
        return self.excite(f0_samples, generator, random_phase).merged


def frame_rate_excitation(frame_f0, hop: int, source: SourceModule, generator=None, random_phase=None):
    """Sample-rate synthesis pooled back to one value per frame, ``(B, frames)``.

    Synthesising directly at frame rate would alias every singing F0, so the
    excitation is built per sample and averaged over each hop.
    """
    f0 = upsample_f0(frame_f0, hop)
    if f0.dim() == 1:
        f0 = f0.unsqueeze(0)
    return pool_to_frames(source(f0, generator=generator, random_phase=random_phase), hop)
