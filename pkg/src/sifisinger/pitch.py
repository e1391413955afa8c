"""Differentiable F0 re-extraction and the waveform reconstruction losses.

``PitchNet`` is a small convolutional classifier over 1024-sample windows of
16 kHz audio that outputs a distribution over 360 cent-spaced pitch bins.
F0 is read out as the probability-weighted mean cent value, so gradients
flow from the decoded pitch back to the input samples.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsp
from .errors import (CorruptCheckpoint, LengthMismatch, NotNormalized, TooShortSignal, VersionMismatch,
                     WrongSampleRate)

log = logging.getLogger(__name__)

N_BINS = 360
CENTS_PER_BIN = 20.0
FMIN_HZ = 32.70319566257483       # C1
CENT_REF_HZ = 10.0
PITCH_CKPT_VERSION = 1


def hz_to_cents(f):
    return 1200.0 * np.log2(np.asarray(f, dtype=np.float64) / CENT_REF_HZ)


def cents_to_hz(c):
    if isinstance(c, torch.Tensor):
        return CENT_REF_HZ * torch.pow(2.0, c / 1200.0)
    return CENT_REF_HZ * 2.0 ** (np.asarray(c, dtype=np.float64) / 1200.0)


@dataclass(frozen=True)
class PitchBins:
    n_bins: int = N_BINS
    cents_per_bin: float = CENTS_PER_BIN
    fmin: float = FMIN_HZ

    @property
    def cents(self) -> np.ndarray:
        return hz_to_cents(self.fmin) + self.cents_per_bin * np.arange(self.n_bins)

    @property
    def centers_hz(self) -> np.ndarray:
        return cents_to_hz(self.cents)


@dataclass
class PitchNetConfig:
    sample_rate: int = dsp.PITCH_SAMPLE_RATE
    window: int = 1024
    hop: int = 160
    channels: tuple = (64, 64, 128, 128, 256)
    kernels: tuple = (63, 15, 15, 7, 7)
    first_stride: int = 4
    dropout: float = 0.25


class PitchNet(nn.Module):
    def __init__(self, config: PitchNetConfig = PitchNetConfig(), bins: PitchBins = PitchBins()):
        super().__init__()
        self.config = config
        self.bins = bins
        layers = []
        in_ch, length = 1, config.window
        for i, (ch, k) in enumerate(zip(config.channels, config.kernels)):
            stride = config.first_stride if i == 0 else 1
            layers += [
                nn.Conv1d(in_ch, ch, k, stride=stride, padding=(k - stride + 1) // 2),
                nn.ReLU(),
                nn.BatchNorm1d(ch),
                nn.MaxPool1d(2),
                nn.Dropout(config.dropout),
            ]
            in_ch = ch
            length = length // stride // 2
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(in_ch * length, bins.n_bins)
        self.register_buffer("bin_cents", torch.tensor(bins.cents, dtype=torch.float32))

    def frame(self, wave):
        """(B, N) 16 kHz audio -> (B, frames, window), frames centred on multiples of hop."""
        c = self.config
        half = c.window // 2
        x = F.pad(wave, (half, half))
        return x.unfold(-1, c.window, c.hop)

    def forward_frames(self, frames):
        """(N, window) -> (N, n_bins) logits; each frame is standardised first."""
        frames = frames - frames.mean(-1, keepdim=True)
        frames = frames / torch.sqrt(frames.pow(2).mean(-1, keepdim=True) + 1e-8)
        h = self.features(frames.unsqueeze(1))
        return self.classifier(h.flatten(1))

    def forward(self, wave):
        """(B, N) -> (B, frames, n_bins) logits."""
        frames = self.frame(wave)
        B, T, W = frames.shape
        return self.forward_frames(frames.reshape(B * T, W)).reshape(B, T, -1)


def pitch_logits(net: PitchNet, wave16k, sample_rate: int = dsp.PITCH_SAMPLE_RATE) -> torch.Tensor:
    """Per-frame pitch probabilities ``(..., frames, 360)`` (softmax over bins)."""
    if sample_rate != net.config.sample_rate:
        raise WrongSampleRate(f"pitch net expects {net.config.sample_rate} Hz input, got {sample_rate}")
    x = torch.as_tensor(wave16k)
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-1] < net.config.window:
        raise TooShortSignal(f"need at least {net.config.window} samples at 16 kHz")
    probs = torch.softmax(net(x.to(net.bin_cents.dtype)), dim=-1)
    return probs.squeeze(0) if squeeze else probs


def decode_f0_weighted(probs: torch.Tensor, bins: PitchBins = PitchBins(), atol: float = 1e-4) -> torch.Tensor:
    """Expected pitch in cent space, returned in Hz; no argmax, fully differentiable."""
    sums = probs.detach().sum(-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol):
        raise NotNormalized(f"probability rows must sum to 1 (got range {float(sums.min()):.6f}..{float(sums.max()):.6f})")
    cents = torch.as_tensor(bins.cents, dtype=probs.dtype, device=probs.device)
    return cents_to_hz((probs * cents).sum(-1))


def estimate_f0(net: PitchNet, wave44k, sample_rate: int = dsp.SAMPLE_RATE) -> torch.Tensor:
    """Resample to 16 kHz, run the pitch net, decode by weighted sum -> (B, frames) Hz."""
    x16 = dsp.resample(wave44k, sample_rate, net.config.sample_rate)
    return decode_f0_weighted(pitch_logits(net, x16), net.bins)


def _pitch_frames_to_ref(n_pitch_frames, net: PitchNet, ref_hop: int, ref_rate: int, n_ref: int):
    t = np.arange(n_pitch_frames) * net.config.hop / net.config.sample_rate
    idx = np.clip(np.rint(t * ref_rate / ref_hop).astype(np.int64), 0, n_ref - 1)
    return torch.as_tensor(idx)


def f0_recon_loss(net: PitchNet, y, y_hat, lambda_f0: float = 1.0, vuv=None, sample_rate: int = dsp.SAMPLE_RATE,
                  ref_hop: int = 512, scale: str = "log") -> torch.Tensor:
    """``lambda_f0 * MSE(F0(resample(y)), F0(resample(y_hat)))`` over voiced frames.

    ``vuv`` is the reference voicing at ``ref_hop`` frame rate for ``y``; when
    omitted it is computed with the reference tracker.  The target branch
    is detached, and the pitch net must be frozen by the caller.  With
    ``scale="log"`` the error is taken on natural-log F0.
    """
    y = torch.as_tensor(y)
    if y.dim() == 1:
        y, y_hat = y.unsqueeze(0), y_hat.unsqueeze(0)
    with torch.no_grad():
        f0_ref = estimate_f0(net, y, sample_rate)
    f0_gen = estimate_f0(net, y_hat, sample_rate)
    if abs(f0_ref.shape[-1] - f0_gen.shape[-1]) > 1 or y.shape[:-1] != y_hat.shape[:-1]:
        raise LengthMismatch(f"target {tuple(y.shape)} vs generated {tuple(y_hat.shape)}")
    n = min(f0_ref.shape[-1], f0_gen.shape[-1])
    f0_ref, f0_gen = f0_ref[..., :n], f0_gen[..., :n]
    if vuv is None:
        vuv = torch.stack([torch.as_tensor(dsp.extract_f0_reference(
            yi.detach().cpu().numpy(), sample_rate, frame_hop=ref_hop)[1]) for yi in y])
    vuv = torch.as_tensor(vuv, device=y_hat.device).bool()
    if vuv.dim() == 1:
        vuv = vuv.unsqueeze(0)
    idx = _pitch_frames_to_ref(n, net, ref_hop, sample_rate, vuv.shape[-1])
    mask = vuv[:, idx].to(f0_gen.dtype)
    if scale == "log":
        err = (torch.log(f0_gen) - torch.log(f0_ref)) ** 2
    elif scale == "hz":
        err = (f0_gen - f0_ref) ** 2
    else:
        raise ValueError(f"unknown scale {scale!r}")
    return lambda_f0 * (err * mask).sum() / mask.sum().clamp(min=1.0)


def mcep_recon_loss(y, y_hat, lambda_mcep: float = 1.0, cfg: dsp.DSPConfig = dsp.DSPConfig()) -> torch.Tensor:
    """``lambda_mcep * mean|mcep(y) - mcep(y_hat)|`` on the raw (unnormalised) mcep."""
    y = torch.as_tensor(y)
    if y.shape != y_hat.shape:
        raise LengthMismatch(f"target {tuple(y.shape)} vs generated {tuple(y_hat.shape)}")
    with torch.no_grad():
        target = dsp.extract_mcep(y, cfg)
    return lambda_mcep * torch.mean(torch.abs(dsp.extract_mcep(y_hat, cfg) - target))


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


# -- pretraining on synthetic tones ------------------------------------------

def _formant_gain(freqs, rng):
    g = np.full_like(freqs, rng.uniform(0.01, 0.1))
    for _ in range(int(rng.integers(1, 5))):
        fc, bw = np.exp(rng.uniform(np.log(200.0), np.log(5000.0))), rng.uniform(50.0, 400.0)
        g += rng.uniform(0.2, 1.0) / (1.0 + ((freqs - fc) / bw) ** 2)
    return g


def synth_tones(n: int, rng: np.random.Generator, length: int = 1024, sample_rate: int = 16000,
                f_lo: float = 55.0, f_hi: float = 1000.0, snr_db=(20.0, 40.0)):
    """Harmonic tones with log-uniform F0, random tilt, optional formant envelope, dropped harmonics and white noise.

    Returns ``(audio (n, length) float32, f0 (n,))``.
    """
    f0 = np.exp(rng.uniform(np.log(f_lo), np.log(f_hi), n))
    t = np.arange(length) / sample_rate
    out = np.zeros((n, length))
    for i in range(n):
        n_h = max(1, int((sample_rate / 2 - 200) // f0[i]))
        n_h = min(n_h, 40)
        h = np.arange(1, n_h + 1)
        tilt = rng.uniform(0.3, 2.0)
        amp = rng.uniform(0.2, 1.0, n_h) * h ** (-tilt)
        if rng.random() < 0.6:
            # resonant envelope: harmonics near formants dominate, the fundamental can be weak
            amp *= _formant_gain(h * f0[i], rng)
        amp *= rng.random(n_h) > rng.uniform(0.0, 0.3)
        amp[0] = max(amp[0], rng.uniform(0.02, 0.3) * amp.max())
        # slight glide inside the window, well under the 50-cent tolerance
        glide = 2.0 ** (rng.uniform(-10, 10) / 1200.0 * (t / t[-1] - 0.5))
        phase = 2 * np.pi * np.cumsum(f0[i] * glide) / sample_rate
        x = (amp[:, None] * np.sin(h[:, None] * phase[None] + rng.uniform(0, 2 * np.pi, (n_h, 1)))).sum(0)
        x /= np.sqrt((x ** 2).mean()) + 1e-12
        snr = rng.uniform(*snr_db)
        x += rng.standard_normal(length) * 10.0 ** (-snr / 20.0)
        out[i] = x * rng.uniform(0.05, 0.8) / np.abs(x).max()
    return out.astype(np.float32), f0


def soft_targets(f0_hz, bins: PitchBins = PitchBins(), std_cents: float = 25.0) -> np.ndarray:
    c = hz_to_cents(f0_hz)[:, None]
    g = np.exp(-0.5 * ((bins.cents[None] - c) / std_cents) ** 2)
    return (g / g.sum(1, keepdims=True)).astype(np.float32)


def cents_error(f0_est, f0_true):
    return np.abs(1200.0 * np.log2(np.asarray(f0_est) / np.asarray(f0_true)))


def evaluate_pitch_net(net: PitchNet, audio, f0_true, batch: int = 256) -> np.ndarray:
    net.eval()
    est = []
    with torch.no_grad():
        for i in range(0, len(audio), batch):
            logits = net.forward_frames(torch.from_numpy(audio[i:i + batch]))
            est.append(decode_f0_weighted(torch.softmax(logits, -1), net.bins).numpy())
    return cents_error(np.concatenate(est), f0_true)


def pretrain_pitch_net(n_tones: int = 10000, epochs: int = 8, batch: int = 64, lr: float = 1e-3, seed: int = 0,
                       config: PitchNetConfig = PitchNetConfig(), progress=None) -> tuple[PitchNet, dict]:
    """Fit a fresh ``PitchNet`` on ``n_tones`` synthetic tones; returns the net and a summary."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    audio, f0 = synth_tones(n_tones, rng, config.window, config.sample_rate)
    targets = soft_targets(f0)
    val_audio, val_f0 = synth_tones(max(200, n_tones // 20), np.random.default_rng(seed + 1), config.window,
                                    config.sample_rate)
    net = PitchNet(config)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    xa, ya = torch.from_numpy(audio), torch.from_numpy(targets)
    history = []
    t0 = time.time()
    for epoch in range(epochs):
        net.train()
        perm = torch.randperm(n_tones)
        total = 0.0
        for i in range(0, n_tones, batch):
            idx = perm[i:i + batch]
            logits = net.forward_frames(xa[idx])
            loss = -(ya[idx] * F.log_softmax(logits, -1)).sum(-1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        err = evaluate_pitch_net(net, val_audio, val_f0)
        acc = float(np.mean(err < 50.0))
        history.append({"epoch": epoch, "loss": total / n_tones, "val_acc50": acc,
                        "val_median_cents": float(np.median(err)), "elapsed_s": time.time() - t0})
        log.info("pitch epoch %d loss %.4f acc50 %.3f", epoch, total / n_tones, acc)
        if progress:
            progress(history[-1])
    net.eval()
    return net, {"history": history, "n_tones": n_tones, "seed": seed}


def save_pitch_net(net: PitchNet, path, extra=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save({"schema_version": PITCH_CKPT_VERSION, "config": asdict(net.config), "state_dict": net.state_dict(),
                "extra": extra or {}}, tmp)
    tmp.replace(path)


def load_pitch_net(path) -> PitchNet:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CorruptCheckpoint(f"{path}: cannot read pitch-net checkpoint ({e})") from None
    if not isinstance(blob, dict) or "schema_version" not in blob:
        raise CorruptCheckpoint(f"{path}: not a pitch-net checkpoint")
    if blob["schema_version"] != PITCH_CKPT_VERSION:
        raise VersionMismatch(f"{path}: pitch-net schema {blob['schema_version']}, expected {PITCH_CKPT_VERSION}")
    cfg = blob["config"]
    cfg["channels"], cfg["kernels"] = tuple(cfg["channels"]), tuple(cfg["kernels"])
    net = PitchNet(PitchNetConfig(**cfg))
    net.load_state_dict(blob["state_dict"])
    return net.eval()
