"""Score-conditioned prior: score encoder, duration predictor, length regulator,
F0 / mcep acoustic decoders, AM source conditioning and the AM decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import FrameMisalignment, NegativeDuration, ShapeMismatch
from .layers import FFTStack, masked_mean, sequence_mask
from .source import SourceConfig, SourceModule, frame_rate_excitation


@dataclass
class EncoderConfig:
    hidden_size: int = 192
    filter_channels: int = 768
    n_heads: int = 2
    kernel_size: int = 3
    dropout: float = 0.1
    encoder_layers: int = 6
    decoder_layers: int = 4      # each of the F0 and mcep decoders
    am_layers: int = 4
    latent_size: int = 192
    mcep_dims: int = 80
    duration_filter: int = 256
    am_source: bool = True

    def __post_init__(self):
        if self.hidden_size <= 0 or self.filter_channels <= 0:
            raise ValueError("hidden_size and filter_channels must be positive")


@dataclass
class LatentSequence:
    mean: torch.Tensor      # (B, T, D)
    log_var: torch.Tensor   # (B, T, D)
    z: torch.Tensor         # (B, T, D)
    eps: torch.Tensor       # (B, T, D)


def reparameterize(mean, log_var, eps=None, noise_scale=1.0) -> LatentSequence:
    if eps is None:
        eps = torch.randn_like(mean)
    z = mean + torch.exp(0.5 * log_var) * eps * noise_scale
    return LatentSequence(mean, log_var, z, eps)


def length_regulate(hidden: torch.Tensor, durations: torch.Tensor, max_len: int | None = None):
    """Repeat phoneme row ``i`` ``durations[i]`` times.

    ``hidden`` is ``(P, C)`` or ``(B, P, C)``; returns the expanded frames (zero
    padded to the longest item in the batch) and per-item frame counts.
    """
    squeeze = hidden.dim() == 2
    if squeeze:
        hidden, durations = hidden.unsqueeze(0), torch.as_tensor(durations).unsqueeze(0)
    durations = torch.as_tensor(durations, device=hidden.device).long()
    if durations.shape != hidden.shape[:2]:
        raise ShapeMismatch(f"durations {tuple(durations.shape)} vs hidden {tuple(hidden.shape[:2])}")
    if torch.any(durations < 0):
        raise NegativeDuration("durations must be >= 0")
    outs = [torch.repeat_interleave(h, d, dim=0) for h, d in zip(hidden, durations)]
    lengths = durations.sum(1)
    T = int(lengths.max()) if max_len is None else max_len
    out = hidden.new_zeros(hidden.shape[0], T, hidden.shape[2])
    for i, o in enumerate(outs):
        n = min(len(o), T)
        out[i, :n] = o[:n]
    if squeeze:
        return out[0], lengths[0]
    return out, lengths


def durations_from_log(log_dur: torch.Tensor, min_frames: int = 1) -> torch.Tensor:
    """Inverse of the ``log(frames + 1)`` target; clamped to ``min_frames``."""
    return torch.clamp(torch.round(torch.exp(log_dur) - 1.0), min=min_frames).long()


def duration_loss(log_dur_pred, dur_frames, note_dur_frames, mask) -> torch.Tensor:
    """MSE in ``log(frames + 1)`` space over both heads, real phonemes only."""
    target = torch.stack([torch.log(dur_frames.float() + 1), torch.log(note_dur_frames.float() + 1)], -1)
    return masked_mean((log_dur_pred - target) ** 2, mask)


def am_loss(lf0_pred, mcep_pred, lf0_target, mcep_target, lambda1=1.0, lambda2=1.0,
            frame_mask=None, voiced_mask=None, vuv_logit=None, lambda_vuv=0.0) -> torch.Tensor:
    """``lambda1 * MSE(LF0) + lambda2 * mean|Mcep - Mcep_pred|``.

    LF0 error counts voiced frames only; both terms ignore padded frames.  When
    ``vuv_logit`` is given, ``lambda_vuv`` times a voicing BCE is added.
    """
    if lf0_pred.shape != lf0_target.shape or mcep_pred.shape != mcep_target.shape:
        raise ShapeMismatch("prediction and target shapes differ")
    if frame_mask is None:
        frame_mask = torch.ones(lf0_target.shape, dtype=torch.bool, device=lf0_target.device)
    if voiced_mask is None:
        voiced_mask = frame_mask
    voiced_mask = voiced_mask & frame_mask
    loss = lambda1 * masked_mean((lf0_pred - lf0_target) ** 2, voiced_mask)
    loss = loss + lambda2 * masked_mean((mcep_pred - mcep_target).abs(), frame_mask)
    if vuv_logit is not None and lambda_vuv:
        bce = F.binary_cross_entropy_with_logits(vuv_logit, voiced_mask.to(vuv_logit.dtype), reduction="none")
        loss = loss + lambda_vuv * masked_mean(bce, frame_mask)
    return loss


class DurationPredictor(nn.Module):
    def __init__(self, in_channels, filter_channels, kernel_size=3, dropout=0.1):
        super().__init__()
        self.conv_1 = nn.Conv1d(in_channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.norm_1 = nn.LayerNorm(filter_channels)
        self.conv_2 = nn.Conv1d(filter_channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.norm_2 = nn.LayerNorm(filter_channels)
        self.drop = nn.Dropout(dropout)
        self.proj = nn.Linear(filter_channels, 2)  # phoneme, note

    def forward(self, x, mask):
        m = mask.unsqueeze(1).to(x.dtype)
        h = torch.relu(self.conv_1(x.transpose(1, 2) * m)).transpose(1, 2)
        h = self.drop(self.norm_1(h))
        h = torch.relu(self.conv_2(h.transpose(1, 2) * m)).transpose(1, 2)
        h = self.drop(self.norm_2(h))
        return self.proj(h) * mask.unsqueeze(-1).to(x.dtype)


class PriorEncoder(nn.Module):
    def __init__(self, n_phonemes, n_notes, config: EncoderConfig = EncoderConfig(),
                 source: SourceConfig = SourceConfig(), hop: int = 512):
        super().__init__()
        c = config
        self.config = c
        self.hop = hop
        H = c.hidden_size
        self.phoneme_emb = nn.Embedding(n_phonemes, H, padding_idx=0)
        self.note_emb = nn.Embedding(n_notes, H, padding_idx=0)
        self.slur_emb = nn.Embedding(2, H)
        for emb in (self.phoneme_emb, self.note_emb, self.slur_emb):
            nn.init.normal_(emb.weight, 0.0, H ** -0.5)
        stack = dict(channels=H, filter_channels=c.filter_channels, n_heads=c.n_heads,
                     kernel_size=c.kernel_size, dropout=c.dropout)
        self.encoder = FFTStack(c.encoder_layers, **stack)
        self.duration_predictor = DurationPredictor(H, c.duration_filter, 3, c.dropout)

        self.note_pitch_proj = nn.Linear(2, H)
        self.f0_decoder = FFTStack(c.decoder_layers, **stack)
        self.f0_out = nn.Linear(H, 2)  # normalised log-F0, voicing logit
        self.mcep_decoder = FFTStack(c.decoder_layers, **stack)
        self.mcep_out = nn.Linear(H, c.mcep_dims)

        self.am_source = SourceModule(source) if c.am_source else None
        self.am_in = nn.Linear(self.am_input_width, H)
        self.am_decoder = FFTStack(c.am_layers, **stack)
        self.am_out = nn.Linear(H, 2 * c.latent_size)

        self.register_buffer("lf0_mean", torch.tensor(math.log(440.0)))
        self.register_buffer("lf0_std", torch.tensor(0.3))

    @property
    def am_input_width(self):
        c = self.config
        return c.hidden_size + c.mcep_dims + (1 if c.am_source else 0)

    def set_lf0_stats(self, mean, std):
        self.lf0_mean.fill_(float(mean))
        self.lf0_std.fill_(float(std))

    # -- phoneme level --------------------------------------------------

    def encode_score(self, phoneme_ids, note_ids, slur_ids, mask=None):
        if not (phoneme_ids.shape == note_ids.shape == slur_ids.shape):
            raise ShapeMismatch("phoneme, note and slur id sequences must align")
        if mask is None:
            mask = phoneme_ids != 0
        x = self.phoneme_emb(phoneme_ids) + self.note_emb(note_ids) + self.slur_emb(slur_ids)
        return self.encoder(x * math.sqrt(self.config.hidden_size), mask)

    def predict_duration(self, hidden, mask):
        """Returns ``(B, P, 2)`` log(frames + 1) predictions: phoneme, note."""
        return self.duration_predictor(hidden, mask)

    # -- frame level ----------------------------------------------------

    def note_pitch_features(self, frame_midi):
        """(B, T) MIDI numbers (0 = rest) -> (B, T, 2) [normalised note log-F0, is_note]."""
        is_note = (frame_midi > 0).to(self.lf0_mean.dtype)
        lf0 = (math.log(440.0) + (frame_midi.to(is_note.dtype) - 69.0) / 12.0 * math.log(2.0))
        lf0 = (lf0 - self.lf0_mean) / self.lf0_std * is_note
        return torch.stack([lf0, is_note], -1)

    def decode_acoustics(self, frame_hidden, frame_midi, mask):
        """-> (normalised LF0 (B, T), voicing logit (B, T), mcep (B, T, 80))."""
        h_f0 = frame_hidden + self.note_pitch_proj(self.note_pitch_features(frame_midi))
        f0_out = self.f0_out(self.f0_decoder(h_f0, mask))
        mcep = self.mcep_out(self.mcep_decoder(frame_hidden, mask))
        m = mask.to(frame_hidden.dtype)
        return f0_out[..., 0] * m, f0_out[..., 1], mcep * m.unsqueeze(-1)

    def f0_hz(self, lf0_norm, voiced):
        """Denormalised F0 in Hz, zero where ``voiced`` is false."""
        return torch.exp(lf0_norm * self.lf0_std + self.lf0_mean) * voiced.to(lf0_norm.dtype)

    def am_excitation(self, f0_hz, generator=None, random_phase=None):
        return frame_rate_excitation(f0_hz.detach(), self.hop, self.am_source, generator, random_phase)

    def prior_distribution(self, frame_hidden, mcep_pred, am_exc, mask, eps=None, noise_scale=1.0):
        T = frame_hidden.shape[1]
        if mcep_pred.shape[1] != T or (am_exc is not None and am_exc.shape[1] != T) or mask.shape[1] != T:
            raise FrameMisalignment("prior inputs are not frame aligned")
        parts = [frame_hidden, mcep_pred]
        if self.config.am_source:
            if am_exc is None:
                raise ValueError("AM excitation required when am_source is enabled")
            parts.append(am_exc.unsqueeze(-1))
        x = self.am_in(torch.cat(parts, -1))
        h = self.am_out(self.am_decoder(x, mask))
        mean, log_var = h.chunk(2, dim=-1)
        m = mask.unsqueeze(-1).to(h.dtype)
        return reparameterize(mean * m, log_var * m, eps, noise_scale)

    def forward(self, phoneme_ids, note_ids, note_midi, slur_ids, ph_lengths, durations=None,
                max_frames=None, eps=None, noise_scale=1.0, generator=None, random_phase=None):
        """Full prior path.

        With ``durations`` (teacher forcing) the length regulator uses them;
        otherwise predicted durations, clamped to at least one frame.
        The prior is conditioned on the *predicted* mcep and F0 either way.
        """
        ph_mask = sequence_mask(ph_lengths, phoneme_ids.shape[1])
        hidden = self.encode_score(phoneme_ids, note_ids, slur_ids, ph_mask)
        log_dur = self.predict_duration(hidden, ph_mask)
        if durations is None:
            durations = durations_from_log(log_dur[..., 0]) * ph_mask
        frame_hidden, frame_lengths = length_regulate(hidden, durations, max_frames)
        frame_midi, _ = length_regulate(note_midi.unsqueeze(-1).to(hidden.dtype), durations, max_frames)
        frame_midi = frame_midi.squeeze(-1)
        mask = sequence_mask(frame_lengths, frame_hidden.shape[1])
        lf0, vuv_logit, mcep = self.decode_acoustics(frame_hidden, frame_midi, mask)
        voiced = (vuv_logit > 0) & mask
        f0 = self.f0_hz(lf0, voiced)
        exc = self.am_excitation(f0, generator, random_phase) if self.config.am_source else None
        prior = self.prior_distribution(frame_hidden, mcep, exc, mask, eps, noise_scale)
        return dict(hidden=hidden, ph_mask=ph_mask, log_dur=log_dur, durations=durations,
                    frame_hidden=frame_hidden, frame_mask=mask, frame_lengths=frame_lengths,
                    lf0=lf0, vuv_logit=vuv_logit, mcep=mcep, f0_hz=f0, am_exc=exc, prior=prior)
