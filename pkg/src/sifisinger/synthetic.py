"""Procedurally generated singing: transcriptions in the corpus format plus matching audio.

Voiced phonemes are additive harmonic tones shaped by fixed formant
envelopes; unvoiced consonants are band-limited noise; ``SP`` is near
silence.  F0 follows the note sequence with glides and vibrato.  Phoneme
boundaries land on frame boundaries so labels and features agree exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import dsp
from .score_io import ScoreEntry, format_transcription, midi_to_hz, note_to_midi, seconds_to_frames

VOWELS = {
    "a": (800, 1200, 2600),
    "e": (500, 1800, 2600),
    "i": (300, 2300, 3000),
    "o": (500, 900, 2500),
    "u": (320, 800, 2400),
}
VOICED_CONS = {"m": (250, 1200, 2500), "n": (250, 1600, 2600), "l": (360, 1300, 2700)}
UNVOICED_CONS = {"s": (4000, 10000), "sh": (2000, 6000), "h": (300, 4000)}
SCALE = ["A3", "B3", "C#4", "D4", "E4", "F#4", "G#4", "A4", "B4", "C#5"]


def _envelope(freqs, formants, bw=(80.0, 100.0, 140.0)):
    env = np.zeros_like(freqs)
    for f, b, g in zip(formants, bw, (1.0, 0.6, 0.3)):
        env += g / (1.0 + ((freqs - f) / b) ** 2)
    return (env + 0.02) * np.exp(-freqs / 6000.0)


def random_entry(utt_id: str, rng: np.random.Generator, n_syllables=(4, 7)) -> ScoreEntry:
    phs, notes, ph_durs, note_durs, slurs, text = [], [], [], [], [], []

    def add(ph, note, dur, slur=0):
        phs.append(ph)
        notes.append(note)
        ph_durs.append(round(float(dur), 2))
        slurs.append(slur)

    add("SP", "rest", rng.uniform(0.10, 0.20))
    note_durs.append(ph_durs[-1])
    for _ in range(int(rng.integers(*n_syllables, endpoint=True))):
        note = SCALE[int(rng.integers(len(SCALE)))]
        vowel = str(rng.choice(list(VOWELS)))
        start = len(phs)
        syl = vowel
        if rng.random() < 0.75:
            cons = str(rng.choice(list(VOICED_CONS) + list(UNVOICED_CONS)))
            add(cons, note, rng.uniform(0.05, 0.10))
            syl = cons + vowel
        add(vowel, note, rng.uniform(0.20, 0.45))
        total = sum(ph_durs[start:])
        note_durs.extend([round(total, 2)] * (len(phs) - start))
        if rng.random() < 0.2:
            note2 = SCALE[int(rng.integers(len(SCALE)))]
            add(vowel, note2, rng.uniform(0.15, 0.30), slur=1)
            note_durs.append(ph_durs[-1])
        text.append(syl)
    add("SP", "rest", rng.uniform(0.10, 0.20))
    note_durs.append(ph_durs[-1])
    return ScoreEntry(utt_id, "".join(text), phs, notes, note_durs, ph_durs, slurs)


def render(entry: ScoreEntry, rng: np.random.Generator, sample_rate: int = dsp.SAMPLE_RATE, hop: int = 512):
    """Audio for ``entry``; length is an exact multiple of ``hop``."""
    frames = seconds_to_frames(entry.phoneme_durations, sample_rate, hop)
    bounds = np.concatenate([[0], np.cumsum(frames)]) * hop
    n = int(bounds[-1])
    t = np.arange(n) / sample_rate

    # F0 track: note pitch on voiced phonemes, 0 elsewhere, then smoothed glides + vibrato
    target = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    kinds = []
    for i, ph in enumerate(entry.phonemes):
        a, b = bounds[i], bounds[i + 1]
        if ph in VOWELS or ph in VOICED_CONS:
            target[a:b] = midi_to_hz(note_to_midi(entry.notes[i]))
            voiced[a:b] = True
            kinds.append("v")
        elif ph in UNVOICED_CONS:
            kinds.append("u")
        else:
            kinds.append("s")
    logf = np.log(np.where(voiced, target, 1.0))
    k = int(0.04 * sample_rate)
    kernel = np.hanning(2 * k + 1)
    kernel /= kernel.sum()
    # glide only inside voiced runs: smooth then restore exact zeros
    filled = logf.copy()
    if voiced.any():
        idx = np.nonzero(voiced)[0]
        filled = np.interp(np.arange(n), idx, logf[idx])
    smooth = np.convolve(np.pad(filled, k, mode="edge"), kernel, mode="valid")
    vib_rate, vib_depth = rng.uniform(5.0, 6.0), rng.uniform(0.01, 0.02)
    f0 = np.exp(smooth + vib_depth * np.sin(2 * np.pi * vib_rate * t)) * voiced

    # formant trajectory per sample, crossfaded over ~20 ms
    formants = np.zeros((n, 3))
    for i, ph in enumerate(entry.phonemes):
        a, b = bounds[i], bounds[i + 1]
        formants[a:b] = VOWELS.get(ph) or VOICED_CONS.get(ph) or VOWELS["a"]
    kf = int(0.01 * sample_rate)
    kern_f = np.ones(2 * kf + 1) / (2 * kf + 1)
    formants = np.stack([np.convolve(np.pad(formants[:, j], kf, mode="edge"), kern_f, mode="valid")
                         for j in range(3)], 1)

    out = np.zeros(n)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate + rng.uniform(0, 2 * np.pi)
    block = 512
    for s in range(0, n, block):
        e = min(n, s + block)
        fb = f0[s:e]
        if not np.any(fb > 0):
            continue
        n_h = int(min(60, (sample_rate / 2 - 500) // max(fb.max(), 1.0)))
        h = np.arange(1, n_h + 1)
        freqs = h[None] * fb[:, None]
        amps = _envelope(freqs, formants[s:e].mean(0))
        amps *= freqs < sample_rate / 2 - 500
        out[s:e] = (amps * np.sin(h[None] * phase[s:e, None])).sum(1) * (fb > 0)
    out /= np.abs(out).max() + 1e-9
    out *= 0.5

    for i, ph in enumerate(entry.phonemes):
        a, b = bounds[i], bounds[i + 1]
        if kinds[i] == "u":
            lo, hi = UNVOICED_CONS[ph]
            noise = rng.standard_normal(b - a)
            spec = np.fft.rfft(noise)
            fr = np.fft.rfftfreq(b - a, 1.0 / sample_rate)
            spec *= (fr >= lo) & (fr <= hi)
            burst = np.fft.irfft(spec, b - a)
            burst *= 0.15 / (np.abs(burst).max() + 1e-9) * np.hanning(b - a) ** 0.5
            out[a:b] += burst
        elif kinds[i] == "s":
            out[a:b] += 1e-4 * rng.standard_normal(b - a)
    # de-click at voicing onsets/offsets
    ramp = np.convolve(voiced.astype(float), np.ones(256) / 256, mode="same")
    out = out * np.where(voiced, ramp, 1.0)
    return out.astype(np.float32), f0


def make_corpus(out_dir, n: int = 4, seed: int = 0, prefix: str = "syn"):
    """Write ``transcriptions.txt`` and ``wavs/<utt_id>.wav`` for ``n`` utterances."""
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        entry = random_entry(f"{prefix}{i:04d}", rng)
        audio, _ = render(entry, rng)
        dsp.save_wav(out_dir / "wavs" / f"{entry.utt_id}.wav", audio)
        lines.append(format_transcription(entry))
    (out_dir / "transcriptions.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_dir
