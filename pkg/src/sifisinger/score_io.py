"""Opencpop-style transcription parsing, vocabularies and integer encoding.

A transcription line looks like::

    2001000001|感受|g an sh ou|G#4 G#4 D#4 D#4|0.23 0.23 0.50 0.50|0.08 0.15 0.21 0.29|0 0 0 0

i.e. ``utt_id|text|phonemes|notes|note_durations|phoneme_durations|slurs``.
Notes and note durations are given per phoneme, as in the public corpus.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCorpus, LengthMismatch, MalformedLine, NonPositiveDuration, UnknownSymbol

FIELD_SEP = "|"
N_FIELDS = 7
PAD = "<pad>"
REST = "rest"

_PITCH_CLASS = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_NOTE_RE = re.compile(r"^([A-Ga-g])([#b]?)(-?\d+)$")


@dataclass
class ScoreEntry:
    utt_id: str
    text: str
    phonemes: list[str]
    notes: list[str]
    note_durations: list[float]
    phoneme_durations: list[float]
    slur_flags: list[int]

    def __post_init__(self):
        self.validate()

    def validate(self):
        n = len(self.phonemes)
        if len(self.phoneme_durations) != n or len(self.slur_flags) != n:
            raise LengthMismatch(
                f"{self.utt_id}: {n} phonemes, {len(self.phoneme_durations)} durations, "
                f"{len(self.slur_flags)} slur flags"
            )
        if len(self.notes) != len(self.note_durations):
            raise LengthMismatch(
                f"{self.utt_id}: {len(self.notes)} notes but {len(self.note_durations)} note durations"
            )
        if len(self.notes) != n:
            raise LengthMismatch(f"{self.utt_id}: notes must be given per phoneme ({len(self.notes)} != {n})")
        for d in list(self.phoneme_durations) + list(self.note_durations):
            if not d > 0:
                raise NonPositiveDuration(f"{self.utt_id}: duration {d!r} is not positive")
        for s in self.slur_flags:
            if s not in (0, 1):
                raise MalformedLine(f"{self.utt_id}: slur flag {s!r} is not 0/1")

    @property
    def total_duration(self) -> float:
        return float(sum(self.phoneme_durations))


@dataclass
class ScoreTokens:
    phoneme_ids: np.ndarray
    note_ids: np.ndarray
    note_midi: np.ndarray
    slur_ids: np.ndarray
    duration_frames: np.ndarray
    note_duration_frames: np.ndarray

    def __len__(self):
        return len(self.phoneme_ids)


@dataclass
class Vocab:
    """Symbol table; id 0 is reserved for padding / unknown."""

    symbols: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._index = {s: i + 1 for i, s in enumerate(self.symbols)}
        if len(self._index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    def __len__(self):
        return len(self.symbols) + 1

    def __contains__(self, sym):
        return sym in self._index

    def id(self, sym: str) -> int:
        try:
            return self._index[sym]
        except KeyError:
            raise UnknownSymbol(sym) from None

    def symbol(self, idx: int) -> str:
        return PAD if idx == 0 else self.symbols[idx - 1]

    def to_tsv(self) -> str:
        rows = [f"{PAD}\t0"] + [f"{s}\t{i + 1}" for i, s in enumerate(self.symbols)]
        return "\n".join(rows) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            sym, idx = line.split("\t")
            pairs.append((int(idx), sym))
        pairs.sort()
        if not pairs or pairs[0] != (0, PAD):
            raise ValueError(f"{path}: id 0 must be {PAD}")
        syms = [s for i, s in pairs[1:]]
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not contiguous")
        return cls(syms)


def _parse_floats(field_text, utt_id, what):
    vals = []
    for tok in field_text.split():
        try:
            vals.append(float(tok))
        except ValueError:
            raise MalformedLine(f"{utt_id}: {what} value {tok!r} is not a number") from None
    return vals


def parse_transcription(line: str, field_separator: str = FIELD_SEP) -> ScoreEntry:
    fields = line.rstrip("\r\n").split(field_separator)
    if len(fields) != N_FIELDS:
        raise MalformedLine(f"expected {N_FIELDS} fields, got {len(fields)}: {line[:60]!r}")
    utt_id, text, phs, notes, note_durs, ph_durs, slurs = (f.strip() for f in fields)
    if not utt_id:
        raise MalformedLine("empty utterance id")
    try:
        slur_flags = [int(s) for s in slurs.split()]
    except ValueError:
        raise MalformedLine(f"{utt_id}: slur flags must be integers") from None
    return ScoreEntry(
        utt_id=utt_id,
        text=text,
        phonemes=phs.split(),
        notes=notes.split(),
        note_durations=_parse_floats(note_durs, utt_id, "note duration"),
        phoneme_durations=_parse_floats(ph_durs, utt_id, "phoneme duration"),
        slur_flags=slur_flags,
    )


def _fmt_dur(d):
    # shortest repr that round-trips, with at least two decimals like the corpus
    s = repr(float(d))
    return f"{d:.2f}" if float(f"{d:.2f}") == d else s


def format_transcription(entry: ScoreEntry, field_separator: str = FIELD_SEP) -> str:
    return field_separator.join([
        entry.utt_id,
        entry.text,
        " ".join(entry.phonemes),
        " ".join(entry.notes),
        " ".join(_fmt_dur(d) for d in entry.note_durations),
        " ".join(_fmt_dur(d) for d in entry.phoneme_durations),
        " ".join(str(s) for s in entry.slur_flags),
    ])


def read_transcriptions(path, field_separator: str = FIELD_SEP) -> list[ScoreEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(parse_transcription(line, field_separator))
            except ValueError as e:
                raise type(e)(f"{path}:{lineno}: {e}") from None
    return entries


def build_vocab(entries: list[ScoreEntry]) -> tuple[Vocab, Vocab]:
    if not entries:
        raise EmptyCorpus("cannot build vocabularies from an empty corpus")
    phonemes = sorted({p for e in entries for p in e.phonemes})
    notes = sorted({n for e in entries for n in e.notes})
    return Vocab(phonemes), Vocab(notes)


def note_to_midi(note: str) -> int:
    """'A4' -> 69, 'C#4/Db4' -> 61, 'rest' -> 0."""
    if note.lower() == REST:
        return 0
    note = note.split("/")[0]
    m = _NOTE_RE.match(note)
    if m is None:
        raise UnknownSymbol(f"cannot parse note label {note!r}")
    name, acc, octave = m.groups()
    pc = _PITCH_CLASS[name.upper()] + {"#": 1, "b": -1, "": 0}[acc]
    return 12 * (int(octave) + 1) + pc


def midi_to_hz(midi):
    midi = np.asarray(midi, dtype=np.float64)
    return np.where(midi > 0, 440.0 * 2.0 ** ((midi - 69.0) / 12.0), 0.0)


def seconds_to_frames(durations, sample_rate: int, frame_hop: int, total_frames: int | None = None) -> np.ndarray:
    """Round each duration to frames, then fix the last one so the sum hits the total.

    When the correction would leave the last phoneme empty, fall back to
    cumulative rounding, which is exact by construction.
    """
    durations = np.asarray(durations, dtype=np.float64)
    scale = sample_rate / frame_hop
    if total_frames is None:
        total_frames = int(round(durations.sum() * scale))
    frames = np.rint(durations * scale).astype(np.int64)
    frames[-1] += total_frames - frames.sum()
    if frames[-1] < 1 <= total_frames:
        edges = np.rint(np.cumsum(durations) / durations.sum() * total_frames).astype(np.int64)
        frames = np.diff(np.concatenate([[0], edges]))
    return frames


def encode_entry(entry: ScoreEntry, vocabs, frame_hop: int, sample_rate: int,
                 total_frames: int | None = None) -> ScoreTokens:
    ph_vocab, note_vocab = vocabs
    ph_ids = np.array([ph_vocab.id(p) for p in entry.phonemes], dtype=np.int64)
    note_ids = np.array([note_vocab.id(n) for n in entry.notes], dtype=np.int64)
    midi = np.array([note_to_midi(n) for n in entry.notes], dtype=np.int64)
    dur = seconds_to_frames(entry.phoneme_durations, sample_rate, frame_hop, total_frames)
    note_dur = np.rint(np.asarray(entry.note_durations) * sample_rate / frame_hop).astype(np.int64)
    return ScoreTokens(
        phoneme_ids=ph_ids,
        note_ids=note_ids,
        note_midi=midi,
        slur_ids=np.asarray(entry.slur_flags, dtype=np.int64),
        duration_frames=dur,
        note_duration_frames=note_dur,
    )


def frame_count(duration_s: float, sample_rate: int, frame_hop: int) -> int:
    return int(math.floor(duration_s * sample_rate / frame_hop + 0.5))
