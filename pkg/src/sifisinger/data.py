"""Prepared-corpus layout, per-utterance records, and batching.

A prepared data directory contains::

    meta.json           {"format_version": 1, "sample_rate", "hop", "utterances": [...], "dsp": {...}}
    phonemes.tsv        symbol<TAB>id, id 0 = <pad>
    notes.tsv
    norm_stats.json     corpus-level mcep / log-F0 mean and std (shared by prior targets and posterior inputs)
    records/<utt>.npz   one record per utterance (see ``RECORD_FIELDS``)

Records store *unnormalised* features; normalisation is applied on load.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .score_io import ScoreEntry, Vocab, build_vocab, encode_entry, format_transcription, parse_transcription, read_transcriptions

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
RECORD_FIELDS = ("phoneme_ids", "note_ids", "note_midi", "slur_ids", "duration_frames", "note_duration_frames",
                 "mcep", "log_f0", "vuv", "wave")


def load_external_f0(f0_dir, utt_id):
    """``<utt>.npy`` or ``<utt>.txt`` (one Hz value per frame, 0 = unvoiced)."""
    f0_dir = Path(f0_dir)
    for suffix, reader in ((".npy", np.load), (".txt", np.loadtxt)):
        p = f0_dir / f"{utt_id}{suffix}"
        if p.exists():
            return np.asarray(reader(p), dtype=np.float64).reshape(-1)
    raise FileNotFoundError(f"no F0 file for {utt_id} in {f0_dir}")


def save_record(path, entry: ScoreEntry, tokens, feats: dsp.AcousticFeatures, wave: np.ndarray):
    np.savez(path, format_version=FORMAT_VERSION, utt_id=entry.utt_id, transcription=format_transcription(entry),
             phoneme_ids=tokens.phoneme_ids, note_ids=tokens.note_ids, note_midi=tokens.note_midi,
             slur_ids=tokens.slur_ids, duration_frames=tokens.duration_frames,
             note_duration_frames=tokens.note_duration_frames, mcep=feats.mcep, log_f0=feats.log_f0,
             vuv=feats.vuv, wave=wave.astype(np.float32))


def load_record(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        rec = {k: z[k] for k in z.files}
    version = int(rec.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: record format {version}, expected {FORMAT_VERSION}")
    rec["utt_id"] = str(rec["utt_id"])
    rec["transcription"] = str(rec["transcription"])
    return rec


def prepare_dataset(transcriptions, wav_dir, out_dir, cfg: dsp.DSPConfig = dsp.DSPConfig(), f0_dir=None,
                    utt_ids=None) -> Path:
    """Parse scores, extract features from the WAVs, fit normalisation, write the prepared layout."""
    entries = read_transcriptions(transcriptions)
    if utt_ids is not None:
        keep = set(utt_ids)
        entries = [e for e in entries if e.utt_id in keep]
    vocabs = build_vocab(entries)
    out_dir = Path(out_dir)
    (out_dir / "records").mkdir(parents=True, exist_ok=True)
    all_feats = []
    for e in entries:
        w = dsp.load_wav(Path(wav_dir) / f"{e.utt_id}.wav", cfg.sample_rate)
        n = dsp.n_frames(len(w), cfg.hop)
        wave = w.samples[: n * cfg.hop]
        f0 = load_external_f0(f0_dir, e.utt_id) if f0_dir else None
        feats = dsp.extract_features(wave, cfg, f0)
        tokens = encode_entry(e, vocabs, cfg.hop, cfg.sample_rate, total_frames=n)
        save_record(out_dir / "records" / f"{e.utt_id}.npz", e, tokens, feats, wave)
        all_feats.append(feats)
        log.info("prepared %s: %d frames, %.1f%% voiced", e.utt_id, n, 100 * feats.vuv.mean())
    stats = dsp.fit_norm_stats(all_feats)
    stats.save(out_dir / "norm_stats.json")
    vocabs[0].save(out_dir / "phonemes.tsv")
    vocabs[1].save(out_dir / "notes.tsv")
    meta = {"format_version": FORMAT_VERSION, "sample_rate": cfg.sample_rate, "hop": cfg.hop,
            "utterances": [e.utt_id for e in entries], "dsp": asdict(cfg)}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1, ensure_ascii=False))
    return out_dir


class SingingDataset(torch.utils.data.Dataset):
    """Normalised training items from a prepared directory, held in memory."""

    def __init__(self, data_dir, utt_ids=None):
        self.root = Path(data_dir)
        self.meta = json.loads((self.root / "meta.json").read_text())
        if self.meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{data_dir}: data format {self.meta.get('format_version')}, expected {FORMAT_VERSION}")
        self.phonemes = Vocab.load(self.root / "phonemes.tsv")
        self.notes = Vocab.load(self.root / "notes.tsv")
        self.stats = dsp.NormStats.load(self.root / "norm_stats.json")
        ids = utt_ids or self.meta["utterances"]
        self.records = [load_record(self.root / "records" / f"{u}.npz") for u in ids]

    def __len__(self):
        return len(self.records)

    @property
    def vocabs(self):
        return self.phonemes, self.notes

    def entry(self, i) -> ScoreEntry:
        return parse_transcription(self.records[i]["transcription"])

    def __getitem__(self, i):
        r = self.records[i]
        feats = dsp.apply_norm(dsp.AcousticFeatures(r["mcep"], r["log_f0"], r["vuv"]), self.stats)
        vuv = r["vuv"].astype(bool)
        return {
            "utt_id": r["utt_id"],
            "phoneme_ids": torch.from_numpy(r["phoneme_ids"]).long(),
            "note_ids": torch.from_numpy(r["note_ids"]).long(),
            "note_midi": torch.from_numpy(r["note_midi"]).long(),
            "slur_ids": torch.from_numpy(r["slur_ids"]).long(),
            "duration_frames": torch.from_numpy(r["duration_frames"]).long(),
            "note_duration_frames": torch.from_numpy(r["note_duration_frames"]).long(),
            "mcep": torch.from_numpy(feats.mcep).float(),
            "lf0": torch.from_numpy(feats.log_f0).float(),
            "vuv": torch.from_numpy(vuv),
            "f0_hz": torch.from_numpy(np.where(vuv, np.exp(r["log_f0"]), 0.0)).float(),
            "wave": torch.from_numpy(r["wave"]).float(),
        }


def collate(items) -> dict:
    pad = torch.nn.utils.rnn.pad_sequence
    batch = {"utt_id": [it["utt_id"] for it in items]}
    for k in ("phoneme_ids", "note_ids", "note_midi", "slur_ids", "duration_frames", "note_duration_frames",
              "mcep", "lf0", "vuv", "f0_hz", "wave"):
        batch[k] = pad([it[k] for it in items], batch_first=True)
    batch["ph_lengths"] = torch.tensor([len(it["phoneme_ids"]) for it in items])
    batch["frame_lengths"] = torch.tensor([len(it["vuv"]) for it in items])
    return batch


def batch_iterator(dataset, batch_size: int, seed: int = 0):
    """Endless shuffled batches; a dataset smaller than the batch is repeated to fill it."""
    g = torch.Generator()
    g.manual_seed(seed)
    while True:
        perm = torch.randperm(len(dataset), generator=g).tolist()
        while len(perm) < batch_size:
            perm += torch.randperm(len(dataset), generator=g).tolist()
        for i in range(0, len(perm) - batch_size + 1, batch_size):
            yield collate([dataset[j] for j in perm[i:i + batch_size]])
