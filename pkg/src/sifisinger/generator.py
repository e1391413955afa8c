"""HiFi-GAN style waveform decoder with multi-scale excitation injection,
the multi-period / multi-resolution discriminator set, and their losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from . import dsp
from .errors import FrameMisalignment, StructureMismatch, TooShortSignal
from .layers import get_padding, leaky
from .source import SourceConfig, SourceModule, upsample_f0


@dataclass
class GeneratorConfig:
    latent_size: int = 192
    hidden: int = 256
    upsample_rates: list = field(default_factory=lambda: [8, 8, 4, 2])
    upsample_kernel_sizes: list = field(default_factory=lambda: [16, 16, 8, 4])
    resblock_kernel_sizes: list = field(default_factory=lambda: [3, 7, 11])
    resblock_dilations: list = field(default_factory=lambda: [[1, 3, 5], [1, 3, 5], [1, 3, 5]])

    def __post_init__(self):
        if len(self.upsample_rates) != len(self.upsample_kernel_sizes):
            raise ValueError("upsample_rates and upsample_kernel_sizes differ in length")

    @property
    def hop(self):
        return math.prod(self.upsample_rates)


def init_weights(m, std=0.01):
    if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
        m.weight.data.normal_(0.0, std)


class ResBlock(nn.Module):
    def __init__(self, channels, kernel_size=3, dilations=(1, 3, 5)):
        super().__init__()
        self.convs1 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=get_padding(kernel_size, d)))
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            weight_norm(nn.Conv1d(channels, channels, kernel_size, padding=get_padding(kernel_size)))
            for _ in dilations
        )
        self.apply(init_weights)

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            x = x + c2(leaky(c1(leaky(x))))
        return x


class Generator(nn.Module):
    """Latent frames + frame F0 -> waveform of ``frames * hop`` samples.

    After every upsampling layer the sample-rate excitation is average-pooled
    down to the current resolution, concatenated as one extra channel and
    merged back with a 1x1 convolution.
    """

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), source: SourceConfig = SourceConfig()):
        super().__init__()
        c = config
        self.config = c
        self.hop = c.hop
        self.source = SourceModule(source)
        self.conv_pre = weight_norm(nn.Conv1d(c.latent_size, c.hidden, 7, padding=3))
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        self.pool_factors = []
        ch = c.hidden
        done = 1
        for u, k in zip(c.upsample_rates, c.upsample_kernel_sizes):
            out_ch = ch // 2
            self.ups.append(weight_norm(nn.ConvTranspose1d(ch, out_ch, k, u, padding=(k - u) // 2)))
            self.fuse.append(nn.Conv1d(out_ch + 1, out_ch, 1))
            done *= u
            self.pool_factors.append(self.hop // done)
            self.resblocks.append(nn.ModuleList(
                ResBlock(out_ch, rk, rd) for rk, rd in zip(c.resblock_kernel_sizes, c.resblock_dilations)
            ))
            ch = out_ch
        self.conv_post = weight_norm(nn.Conv1d(ch, 1, 7, padding=3))
        self.ups.apply(init_weights)
        self.conv_post.apply(init_weights)

    def excitation(self, frame_f0, generator=None, random_phase=None):
        f0 = upsample_f0(frame_f0, self.hop)
        if f0.dim() == 1:
            f0 = f0.unsqueeze(0)
        return self.source(f0, generator=generator, random_phase=random_phase)

    def forward(self, z, frame_f0, generator=None, random_phase=None, excitation=None, return_fused=False):
        """``z``: (B, latent, frames); ``frame_f0``: (B, frames) Hz -> (B, frames * hop)."""
        if frame_f0.dim() == 1:
            frame_f0 = frame_f0.unsqueeze(0)
        if z.shape[-1] != frame_f0.shape[-1]:
            raise FrameMisalignment(f"z has {z.shape[-1]} frames, F0 has {frame_f0.shape[-1]}")
        if excitation is None:
            excitation = self.excitation(frame_f0, generator, random_phase)
        exc = excitation.unsqueeze(1).to(z.dtype)
        fused = []
        x = self.conv_pre(z)
        for up, fuse, blocks, pool in zip(self.ups, self.fuse, self.resblocks, self.pool_factors):
            x = up(leaky(x))
            e = F.avg_pool1d(exc, pool, pool) if pool > 1 else exc
            fused.append(e)
            x = fuse(torch.cat([x, e], 1))
            x = sum(b(x) for b in blocks) / len(blocks)
        x = torch.tanh(self.conv_post(leaky(x, 0.01))).squeeze(1)
        return (x, fused) if return_fused else x


# -- discriminators ---------------------------------------------------------

class PeriodDiscriminator(nn.Module):
    def __init__(self, period, channels=(32, 128, 512, 1024, 1024), kernel_size=5, stride=3):
        super().__init__()
        self.period = period
        convs = []
        in_ch = 1
        for i, ch in enumerate(channels):
            s = stride if i < len(channels) - 1 else 1
            convs.append(weight_norm(nn.Conv2d(in_ch, ch, (kernel_size, 1), (s, 1), padding=(get_padding(kernel_size), 0))))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.conv_post = weight_norm(nn.Conv2d(in_ch, 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):
        fmap = []
        b, t = x.shape
        if t % self.period:
            n_pad = self.period - t % self.period
            x = F.pad(x.unsqueeze(1), (0, n_pad), "reflect").squeeze(1)
            t = t + n_pad
        x = x.view(b, 1, t // self.period, self.period)
        for conv in self.convs:
            x = leaky(conv(x))
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return x.flatten(1), fmap


class SpectrogramDiscriminator(nn.Module):
    def __init__(self, fft_size, channels=32):
        super().__init__()
        self.fft_size = fft_size
        self.hop = fft_size // 4
        self.convs = nn.ModuleList([
            weight_norm(nn.Conv2d(1, channels, (3, 9), padding=(1, 4))),
            weight_norm(nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(channels, channels, (3, 3), padding=(1, 1))),
        ])
        self.conv_post = weight_norm(nn.Conv2d(channels, 1, (3, 3), padding=(1, 1)))

    def forward(self, x):
        fmap = []
        x = dsp.stft_magnitude(x, self.fft_size, self.hop, self.fft_size).unsqueeze(1)
        for conv in self.convs:
            x = leaky(conv(x))
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return x.flatten(1), fmap


@dataclass
class DiscriminatorConfig:
    periods: list = field(default_factory=lambda: [2, 3, 5, 7, 11])
    period_channels: list = field(default_factory=lambda: [32, 128, 512, 1024, 1024])
    resolutions: list = field(default_factory=lambda: [512, 1024, 2048])
    spec_channels: int = 32


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        self.discriminators = nn.ModuleList(
            [PeriodDiscriminator(p, config.period_channels) for p in config.periods]
            + [SpectrogramDiscriminator(n, config.spec_channels) for n in config.resolutions]
        )

    @property
    def min_length(self):
        return max(self.config.resolutions)

    def forward(self, wave):
        """-> (list of score tensors, list of per-layer feature lists), one entry per sub-discriminator."""
        if wave.shape[-1] < self.min_length:
            raise TooShortSignal(f"discriminator needs at least {self.min_length} samples")
        scores, feats = [], []
        for d in self.discriminators:
            s, f = d(wave)
            scores.append(s)
            feats.append(f)
        return scores, feats


# -- losses -----------------------------------------------------------------

def _check_structure(a, b):
    if len(a) != len(b):
        raise StructureMismatch(f"{len(a)} vs {len(b)} discriminator outputs")


def discriminator_loss(real_scores, fake_scores):
    """Least-squares ``(D(y) - 1)^2 + D(G(z))^2``, summed over sub-discriminators."""
    _check_structure(real_scores, fake_scores)
    loss = 0.0
    for r, g in zip(real_scores, fake_scores):
        loss = loss + torch.mean((r - 1) ** 2) + torch.mean(g ** 2)
    return loss


def generator_adv_loss(fake_scores):
    loss = 0.0
    for g in fake_scores:
        loss = loss + torch.mean((g - 1) ** 2)
    return loss


def feature_matching_loss(real_feats, fake_feats):
    """Sum over sub-discriminators and layers of the per-layer mean absolute difference."""
    _check_structure(real_feats, fake_feats)
    loss = 0.0
    for rd, gd in zip(real_feats, fake_feats):
        _check_structure(rd, gd)
        for r, g in zip(rd, gd):
            if r.shape != g.shape:
                raise StructureMismatch(f"feature shapes differ: {tuple(r.shape)} vs {tuple(g.shape)}")
            loss = loss + torch.mean(torch.abs(r.detach() - g))
    return loss


def adversarial_losses(real_scores, fake_scores, real_feats, fake_feats):
    """-> (L_adv(D), L_adv(G), L_fm(G)).

    For the discriminator update pass scores computed on a detached fake; for
    the generator update the ``L_adv(D)`` entry is simply ignored.
    """
    return (discriminator_loss(real_scores, fake_scores), generator_adv_loss(fake_scores),
            feature_matching_loss(real_feats, fake_feats))


def mel_loss(y, y_hat, cfg: dsp.DSPConfig = dsp.DSPConfig()):
    return F.l1_loss(dsp.mel_spectrogram(y_hat, cfg), dsp.mel_spectrogram(y, cfg))


def generator_loss(l_adv_g, l_mel, l_fm, lambda_mel=45.0, lambda_fm=2.0):
    return l_adv_g + lambda_mel * l_mel + lambda_fm * l_fm
