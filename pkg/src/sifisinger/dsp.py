"""Signal-processing primitives shared by feature preparation and the loss paths.

Everything that appears inside a training loss (STFT magnitude, log-mel,
mel-cepstrum, resampling) is written in torch and differentiable with respect
to the input samples.  The reference F0 tracker is numpy-only; it prepares
targets and evaluates outputs, it never sits in a gradient path.

Framing convention: the signal is reflect-padded by ``fft_size // 2`` on the
left and ``fft_size // 2 - hop`` on the right, so frame ``t`` is centred on
sample ``t * hop`` and a signal of ``n`` samples yields ``n // hop`` frames.
A waveform of ``F * 512`` samples therefore has exactly ``F`` feature frames,
matching the generator's upsampling factor.
"""
from __future__ import annotations

import json
import math
import wave as _wave
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateDimension, TooShortSignal, UnsupportedRatio, WrongSampleRate

SAMPLE_RATE = 44100
PITCH_SAMPLE_RATE = 16000


@dataclass
class DSPConfig:
    sample_rate: int = SAMPLE_RATE
    fft_size: int = 2048
    win_length: int = 2048
    hop: int = 512
    n_mels: int = 80
    mel_fmin: float = 0.0
    mel_fmax: float = 22050.0
    mel_floor: float = 1e-5
    mcep_dims: int = 80
    mcep_alpha: float = 0.55
    f0_min: float = 55.0
    f0_max: float = 1000.0
    f0_win: int = 2048


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)


# -- I/O -------------------------------------------------------------------

def load_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a 16-bit PCM mono WAV; anything else is rejected."""
    with _wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        if w.getframerate() != expected_rate:
            raise WrongSampleRate(f"{path}: expected {expected_rate} Hz, got {w.getframerate()} Hz")
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(pcm, expected_rate)


def save_wav(path, samples, sample_rate: int = SAMPLE_RATE):
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.rint(samples * 32767.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# -- framing / STFT --------------------------------------------------------

def _as_batch(x):
    x = torch.as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.float()
    squeeze = x.dim() == 1
    return (x.unsqueeze(0) if squeeze else x), squeeze


def n_frames(n_samples: int, hop: int) -> int:
    return n_samples // hop


def _stft(x, fft_size, hop, win_length):
    x, squeeze = _as_batch(x)
    if x.shape[-1] < win_length:
        raise TooShortSignal(f"signal has {x.shape[-1]} samples, needs at least {win_length}")
    if hop > fft_size // 2:
        raise ValueError("hop must not exceed fft_size // 2")
    left, right = fft_size // 2, fft_size // 2 - hop
    x = F.pad(x.unsqueeze(1), (left, right), mode="reflect").squeeze(1)
    window = torch.hann_window(win_length, dtype=x.dtype, device=x.device)
    spec = torch.stft(x, fft_size, hop_length=hop, win_length=win_length, window=window,
                      center=False, return_complex=True)
    spec = spec.transpose(-1, -2)  # (B, frames, bins)
    return (spec.squeeze(0) if squeeze else spec)


def stft_magnitude(x, fft_size: int = 2048, hop: int = 512, win_length: int = 2048) -> torch.Tensor:
    """Hann-windowed STFT magnitude, shape ``(..., frames, fft_size // 2 + 1)``."""
    return _stft(x, fft_size, hop, win_length).abs()


def stft_power(x, fft_size: int = 2048, hop: int = 512, win_length: int = 2048) -> torch.Tensor:
    spec = torch.view_as_real(_stft(x, fft_size, hop, win_length))
    return spec.pow(2).sum(-1)


# -- mel -------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the HTK mel scale, area-normalised, shape (n_mels, bins)."""
    bins = np.linspace(0.0, sample_rate / 2, fft_size // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None] - lo) / (mid - lo)
    down = (hi - bins[None]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb *= (2.0 / (hi - lo))
    return fb


def mel_spectrogram(x, cfg: DSPConfig = DSPConfig()) -> torch.Tensor:
    """Natural-log mel magnitude, shape ``(..., frames, n_mels)``."""
    mag = stft_magnitude(x, cfg.fft_size, cfg.hop, cfg.win_length)
    fb = torch.as_tensor(mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.mel_fmin, cfg.mel_fmax),
                         dtype=mag.dtype, device=mag.device)
    mel = mag @ fb.T
    return torch.log(torch.clamp(mel, min=cfg.mel_floor))


# -- mel-cepstrum ----------------------------------------------------------

def warp_frequency(omega, alpha: float):
    """First-order all-pass frequency warping, maps [0, pi] onto itself."""
    omega = np.asarray(omega, dtype=np.float64)
    return omega + 2.0 * np.arctan(alpha * np.sin(omega) / (1.0 - alpha * np.cos(omega)))


@lru_cache(maxsize=16)
def mcep_matrix(fft_size: int, dims: int, alpha: float, oversample: int = 2) -> np.ndarray:
    """Linear map from a log-magnitude spectrum (bins) to ``dims`` mel-cepstral coefficients.

    The log spectrum is resampled onto a grid uniform in warped frequency
    (linear interpolation between FFT bins), then expanded in a cosine series
    with trapezoidal weights.  Coefficients follow the one-sided convention
    ``log|X(w)| = c0 + sum_{m>=1} c_m cos(m * warp(w))``.
    """
    n_bins = fft_size // 2 + 1
    n_grid = oversample * (n_bins - 1) + 1
    beta = np.linspace(0.0, np.pi, n_grid)
    omega = warp_frequency(beta, -alpha)  # inverse warp
    pos = np.clip(omega / np.pi * (n_bins - 1), 0.0, n_bins - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_bins - 2)
    frac = pos - i0
    interp = np.zeros((n_grid, n_bins))
    interp[np.arange(n_grid), i0] = 1.0 - frac
    interp[np.arange(n_grid), i0 + 1] += frac

    w = np.full(n_grid, 1.0 / (n_grid - 1))
    w[0] = w[-1] = 0.5 / (n_grid - 1)
    m = np.arange(dims)[:, None]
    cos = np.cos(m * beta[None]) * w[None]
    cos[1:] *= 2.0
    return cos @ interp


def log_magnitude(x, cfg: DSPConfig = DSPConfig(), eps: float = 1e-10) -> torch.Tensor:
    return 0.5 * torch.log(stft_power(x, cfg.fft_size, cfg.hop, cfg.win_length) + eps)


def extract_mcep(x, cfg: DSPConfig = DSPConfig()) -> torch.Tensor:
    """Mel-cepstrum, shape ``(..., frames, cfg.mcep_dims)``; c0 tracks log-energy."""
    logmag = log_magnitude(x, cfg)
    mat = torch.as_tensor(mcep_matrix(cfg.fft_size, cfg.mcep_dims, cfg.mcep_alpha),
                          dtype=logmag.dtype, device=logmag.device)
    return logmag @ mat.T


# -- reference F0 ----------------------------------------------------------

def extract_f0_reference(wave, sample_rate: int = SAMPLE_RATE, f_min: float = 55.0, f_max: float = 1000.0,
                         frame_hop: int = 512, win_length: int = 2048, threshold: float = 0.15,
                         voicing_threshold: float = 0.35, silence_db: float = -60.0):
    """Autocorrelation (YIN-style) F0 tracker.

    Returns ``(f0_hz, vuv)`` with one value per ``frame_hop`` samples, frames
    centred like the STFT frames.  A frame is voiced when the cumulative-mean
    normalised difference dips below ``voicing_threshold`` inside the lag
    range and its RMS is above both an absolute floor and ``silence_db``
    relative to the loudest frame.
    """
    if not 30.0 <= f_min < f_max <= 1600.0:
        raise ValueError(f"need 30 <= f_min < f_max <= 1600, got {f_min}, {f_max}")
    x = np.asarray(wave.samples if isinstance(wave, Waveform) else wave, dtype=np.float64)
    n = n_frames(len(x), frame_hop)
    if n == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    tau_min = max(2, int(math.floor(sample_rate / f_max)) - 1)
    tau_max = int(math.ceil(sample_rate / f_min)) + 1
    W = win_length - tau_max - 2
    if W < tau_max // 2:
        raise ValueError("win_length too short for f_min")

    half = win_length // 2
    padded = np.pad(x, (half, win_length))
    idx = np.arange(n)[:, None] * frame_hop + np.arange(win_length)[None]
    frames = padded[idx]  # frame t starts at sample t*hop - half
    frames = frames - frames.mean(axis=1, keepdims=True)

    nfft = 1 << int(math.ceil(math.log2(win_length + W)))
    head = np.zeros_like(frames)
    head[:, :W] = frames[:, :W]
    r = np.fft.irfft(np.conj(np.fft.rfft(head, nfft)) * np.fft.rfft(frames, nfft), nfft)[:, :tau_max + 2]
    sq = np.cumsum(frames ** 2, axis=1)
    sq = np.concatenate([np.zeros((n, 1)), sq], axis=1)
    taus = np.arange(tau_max + 2)
    e0 = sq[:, W][:, None]
    et = sq[:, taus + W] - sq[:, taus]
    d = np.maximum(e0 + et - 2.0 * r, 0.0)

    cum = np.cumsum(d[:, 1:], axis=1)
    cmnd = np.ones_like(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(cum > 0, d[:, 1:] * taus[1:] / cum, 1.0)

    rms = np.sqrt((frames[:, :W] ** 2).mean(axis=1))
    loud = rms.max() if n else 0.0
    energy_ok = (rms > 1e-4) & (rms > loud * 10.0 ** (silence_db / 20.0))

    f0 = np.zeros(n)
    vuv = np.zeros(n, dtype=bool)
    for t in range(n):
        if not energy_ok[t]:
            continue
        c = cmnd[t, tau_min:tau_max + 1]
        below = np.nonzero(c < threshold)[0]
        if len(below):
            k = below[0]
            while k + 1 < len(c) and c[k + 1] < c[k]:
                k += 1
        else:
            k = int(np.argmin(c))
        if c[k] >= voicing_threshold:
            continue
        tau = k + tau_min
        if 1 <= tau < tau_max + 1:
            a, b, cc = cmnd[t, tau - 1], cmnd[t, tau], cmnd[t, tau + 1]
            denom = a - 2 * b + cc
            shift = 0.5 * (a - cc) / denom if denom > 0 else 0.0
            tau_f = tau + float(np.clip(shift, -1.0, 1.0))
        else:
            tau_f = float(tau)
        hz = sample_rate / tau_f
        # tolerate sub-sample overshoot at the range edges
        if 0.97 * f_min <= hz <= 1.03 * f_max:
            f0[t] = min(max(hz, f_min), f_max)
            vuv[t] = True
    return f0, vuv


# -- resampling ------------------------------------------------------------

@lru_cache(maxsize=16)
def _sinc_kernel(orig: int, new: int, zero_crossings: int, rolloff: float):
    base = min(orig, new) * rolloff
    width = int(math.ceil(zero_crossings * orig / base))
    idx = np.arange(-width, width + orig, dtype=np.float64)[None] / orig
    t = (-np.arange(new, dtype=np.float64)[:, None] / new + idx) * base
    t = np.clip(t, -zero_crossings, zero_crossings)
    window = np.cos(t * np.pi / zero_crossings / 2) ** 2
    t = t * np.pi
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(t == 0, 1.0, np.sin(t) / t)
    return sinc * window * (base / orig), width


def resample(x, orig_rate: int, target_rate: int, zero_crossings: int = 16, rolloff: float = 0.99) -> torch.Tensor:
    """Polyphase windowed-sinc resampler; linear, hence differentiable.

    Output length is ``round(n * target_rate / orig_rate)``.
    """
    if int(orig_rate) != orig_rate or int(target_rate) != target_rate or orig_rate <= 0 or target_rate <= 0:
        raise UnsupportedRatio(f"rates must be positive integers: {orig_rate} -> {target_rate}")
    x, squeeze = _as_batch(x)
    if orig_rate == target_rate:
        out = x.clone()
        return out.squeeze(0) if squeeze else out
    g = math.gcd(int(orig_rate), int(target_rate))
    orig, new = int(orig_rate) // g, int(target_rate) // g
    if max(orig, new) > 4096:
        raise UnsupportedRatio(f"reduced ratio {new}/{orig} too large for polyphase resampling")
    kernel, width = _sinc_kernel(orig, new, zero_crossings, rolloff)
    kernel = torch.as_tensor(kernel, dtype=x.dtype, device=x.device).unsqueeze(1)
    n = x.shape[-1]
    y = F.pad(x.unsqueeze(1), (width, width + orig))
    y = F.conv1d(y, kernel, stride=orig)  # (B, new, L')
    y = y.transpose(1, 2).reshape(x.shape[0], -1)
    out_len = int(round(n * new / orig))
    y = y[:, :out_len]
    return y.squeeze(0) if squeeze else y


# -- features + normalisation ----------------------------------------------

@dataclass
class AcousticFeatures:
    mcep: np.ndarray      # (frames, 80)
    log_f0: np.ndarray    # (frames,), 0 where unvoiced
    vuv: np.ndarray       # (frames,), bool
    frame_hop: int = 512
    frame_length: int = 2048

    def __post_init__(self):
        self.mcep = np.asarray(self.mcep, dtype=np.float32)
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float32)
        self.vuv = np.asarray(self.vuv, dtype=bool)
        if self.mcep.ndim != 2 or self.mcep.shape[1] != 80:
            raise ValueError(f"mcep must be frames x 80, got {self.mcep.shape}")
        if not (len(self.mcep) == len(self.log_f0) == len(self.vuv)):
            raise ValueError("mcep, log_f0 and vuv must have the same frame count")
        if not np.array_equal(self.vuv, self.log_f0 != 0):
            raise ValueError("vuv must be exactly log_f0 != 0")
        if not np.all(np.isfinite(self.mcep)):
            raise ValueError("non-finite mcep")

    @property
    def n_frames(self):
        return len(self.vuv)

    @property
    def f0_hz(self):
        return np.where(self.vuv, np.exp(self.log_f0), 0.0)


def f0_to_log(f0_hz):
    f0_hz = np.asarray(f0_hz, dtype=np.float64)
    out = np.zeros_like(f0_hz)
    np.log(f0_hz, out=out, where=f0_hz > 0)
    return out


def extract_features(wave, cfg: DSPConfig = DSPConfig(), f0_hz=None) -> AcousticFeatures:
    """mcep + reference F0 for one utterance; ``f0_hz`` overrides the tracker."""
    x = np.asarray(wave.samples if isinstance(wave, Waveform) else wave, dtype=np.float32)
    with torch.no_grad():
        mcep = extract_mcep(torch.from_numpy(x), cfg).numpy()
    if f0_hz is None:
        f0_hz, _ = extract_f0_reference(x, cfg.sample_rate, cfg.f0_min, cfg.f0_max, cfg.hop, cfg.f0_win)
    f0_hz = np.asarray(f0_hz, dtype=np.float64)
    n = len(mcep)
    if len(f0_hz) < n:
        f0_hz = np.pad(f0_hz, (0, n - len(f0_hz)))
    f0_hz = f0_hz[:n]
    lf0 = f0_to_log(f0_hz)
    return AcousticFeatures(mcep, lf0, lf0 != 0, cfg.hop, cfg.win_length)


@dataclass
class NormStats:
    mcep_mean: np.ndarray
    mcep_std: np.ndarray
    lf0_mean: float
    lf0_std: float

    def __post_init__(self):
        self.mcep_mean = np.asarray(self.mcep_mean, dtype=np.float64)
        self.mcep_std = np.asarray(self.mcep_std, dtype=np.float64)
        if np.any(self.mcep_std <= 0) or not self.lf0_std > 0:
            raise DegenerateDimension("normalisation std must be positive in every dimension")

    def to_json(self):
        return json.dumps({"version": 1, "mcep_mean": self.mcep_mean.tolist(), "mcep_std": self.mcep_std.tolist(),
                           "lf0_mean": float(self.lf0_mean), "lf0_std": float(self.lf0_std)}, indent=1)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["mcep_mean"], d["mcep_std"], d["lf0_mean"], d["lf0_std"])

    # log-F0 helpers usable on numpy arrays and tensors alike
    def norm_lf0(self, lf0, vuv):
        return ((lf0 - self.lf0_mean) / self.lf0_std) * vuv

    def denorm_lf0(self, lf0n, vuv):
        return (lf0n * self.lf0_std + self.lf0_mean) * vuv


def fit_norm_stats(features: list[AcousticFeatures], min_std: float = 1e-8) -> NormStats:
    mcep = np.concatenate([f.mcep for f in features]).astype(np.float64)
    if len(mcep) < 2:
        raise DegenerateDimension("need at least two frames to fit normalisation statistics")
    lf0 = np.concatenate([f.log_f0[f.vuv] for f in features]).astype(np.float64)
    mstd = mcep.std(axis=0)
    bad = np.nonzero(mstd <= min_std)[0]
    if len(bad):
        raise DegenerateDimension(f"mcep dimensions with zero variance: {bad.tolist()}")
    if len(lf0) < 2 or lf0.std() <= min_std:
        raise DegenerateDimension("log-F0 has fewer than two voiced frames or zero variance")
    return NormStats(mcep.mean(axis=0), mstd, float(lf0.mean()), float(lf0.std()))


def apply_norm(feat: AcousticFeatures, stats: NormStats) -> AcousticFeatures:
    mcep = (feat.mcep - stats.mcep_mean) / stats.mcep_std
    lf0 = stats.norm_lf0(feat.log_f0.astype(np.float64), feat.vuv)
    # a voiced frame landing exactly on the mean would read as unvoiced; nudge it
    lf0 = np.where(feat.vuv & (lf0 == 0), 1e-7, lf0)
    return AcousticFeatures(mcep, lf0, feat.vuv, feat.frame_hop, feat.frame_length)


def invert_norm(feat: AcousticFeatures, stats: NormStats) -> AcousticFeatures:
    mcep = feat.mcep.astype(np.float64) * stats.mcep_std + stats.mcep_mean
    lf0 = stats.denorm_lf0(feat.log_f0.astype(np.float64), feat.vuv)
    return AcousticFeatures(mcep, lf0, feat.vuv, feat.frame_hop, feat.frame_length)


def config_dict(cfg: DSPConfig) -> dict:
    return asdict(cfg)
