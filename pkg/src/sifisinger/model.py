"""The synthesis network: prior encoder, posterior encoder and waveform generator.

Training feeds the posterior latent and the reference F0 to the generator on a
random frame-aligned segment.  Inference samples the prior latent and drives
the generator with the predicted F0 and voicing.
"""
from __future__ import annotations

import torch
from torch import nn

from .config import Config
from .generator import Generator
from .layers import sequence_mask
from .posterior import PosteriorEncoder
from .prior import PriorEncoder


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def crop_starts(frame_lengths, segment: int, generator=None):
    """Uniform random start frame per item so that ``segment`` frames fit (0 when too short)."""
    hi = (frame_lengths - segment).clamp(min=0) + 1
    u = torch.rand(len(frame_lengths), generator=generator, dtype=torch.float64)
    return (u * hi.double()).floor().long()


def slice_frames(x, starts, segment: int):
    """Gather ``segment`` frames along dim 1 starting at ``starts[b]``; pads with zeros past the end."""
    T = x.shape[1]
    if T < segment:
        pad = [0, 0] * (x.dim() - 2) + [0, segment - T]
        x = nn.functional.pad(x, pad)
    idx = starts[:, None] + torch.arange(segment)[None]
    idx = idx.clamp(max=x.shape[1] - 1)
    if x.dim() == 3:
        idx = idx.unsqueeze(-1).expand(-1, -1, x.shape[2])
    return torch.gather(x, 1, idx)


class SiFiSinger(nn.Module):
    def __init__(self, cfg: Config, n_phonemes: int, n_notes: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.hop = cfg.dsp.hop
        self.prior_encoder = PriorEncoder(n_phonemes, n_notes, cfg.model.prior, cfg.source, cfg.dsp.hop)
        self.posterior_encoder = PosteriorEncoder(cfg.model.posterior)
        self.generator = Generator(cfg.model.generator, cfg.source)

    def set_norm_stats(self, stats):
        self.prior_encoder.set_lf0_stats(stats.lf0_mean, stats.lf0_std)

    def parameter_counts(self) -> dict:
        parts = {"prior_encoder": self.prior_encoder, "posterior_encoder": self.posterior_encoder,
                 "generator": self.generator}
        counts = {k: count_parameters(m) for k, m in parts.items()}
        counts["total"] = sum(counts.values())
        return counts

    def forward_train(self, batch, generator=None, segment_frames=None):
        """One training forward pass; returns every tensor the losses need."""
        segment = segment_frames or self.cfg.train.segment_frames
        T = batch["mcep"].shape[1]
        prior = self.prior_encoder(batch["phoneme_ids"], batch["note_ids"], batch["note_midi"], batch["slur_ids"],
                                   batch["ph_lengths"], durations=batch["duration_frames"], max_frames=T,
                                   generator=generator)
        mask = sequence_mask(batch["frame_lengths"], T)
        post = self.posterior_encoder(batch["mcep"], batch["lf0"], batch["vuv"], mask)

        starts = crop_starts(batch["frame_lengths"], segment, generator)
        z_seg = slice_frames(post.z, starts, segment).transpose(1, 2)
        f0_seg = slice_frames(batch["f0_hz"], starts, segment)
        vuv_seg = slice_frames(batch["vuv"], starts, segment)
        frames = batch["wave"].reshape(len(starts), -1, self.hop)
        y_seg = slice_frames(frames, starts, segment).reshape(len(starts), -1)
        y_hat = self.generator(z_seg, f0_seg, generator=generator)
        return dict(prior=prior, posterior=post, frame_mask=mask, starts=starts, y=y_seg, y_hat=y_hat,
                    f0_seg=f0_seg, vuv_seg=vuv_seg)

    @torch.no_grad()
    def synthesize(self, phoneme_ids, note_ids, note_midi, slur_ids, ph_lengths=None, durations=None,
                   noise_scale=0.5, seed=0):
        """Waveform(s) from a score.

        ``durations`` (frames per phoneme) gives teacher-forced timing; otherwise
        predicted durations are used.  All randomness comes from ``seed``.
        """
        if phoneme_ids.dim() == 1:
            phoneme_ids, note_ids, note_midi, slur_ids = (t.unsqueeze(0) for t in
                                                          (phoneme_ids, note_ids, note_midi, slur_ids))
            if durations is not None:
                durations = torch.as_tensor(durations).unsqueeze(0)
        if ph_lengths is None:
            ph_lengths = torch.full((phoneme_ids.shape[0],), phoneme_ids.shape[1])
        g = torch.Generator()
        g.manual_seed(int(seed))
        was_training = self.training
        self.eval()
        try:
            prior = self.prior_encoder(phoneme_ids, note_ids, note_midi, slur_ids, ph_lengths, durations=durations,
                                       generator=g, random_phase=False)
            eps = torch.randn(prior["prior"].mean.shape, generator=g)
            z = prior["prior"].mean + torch.exp(0.5 * prior["prior"].log_var) * eps * noise_scale
            z = z * prior["frame_mask"].unsqueeze(-1)
            wave = self.generator(z.transpose(1, 2), prior["f0_hz"], generator=g, random_phase=False)
        finally:
            self.train(was_training)
        lengths = prior["frame_lengths"] * self.hop
        return wave, lengths, prior
