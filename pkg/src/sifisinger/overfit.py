"""Single-utterance overfit run: train, resynthesize with reference timing, score against the recording."""
from __future__ import annotations

import logging
import math
import time
from pathlib import Path

import numpy as np

from . import dsp, synthetic
from .config import Config, desk_config
from .data import SingingDataset, batch_iterator, prepare_dataset
from .metrics import metric_f0_corr, metric_f0_rmse, metric_vuv_error
from .training import Trainer, build_models

log = logging.getLogger(__name__)


def make_fixture(work_dir, seed: int = 0) -> Path:
    """One synthetic utterance, prepared; returns the prepared data directory."""
    work_dir = Path(work_dir)
    synthetic.make_corpus(work_dir / "corpus", n=1, seed=seed)
    return prepare_dataset(work_dir / "corpus" / "transcriptions.txt", work_dir / "corpus" / "wavs",
                           work_dir / "prepared")


def resynthesis_metrics(model, dataset: SingingDataset, index: int = 0, seed: int = 0, noise_scale=None) -> dict:
    """Teacher-forced resynthesis of item ``index``, scored with the reference F0 tracker on both signals."""
    item = dataset[index]
    cfg = model.cfg
    wave, lengths, _ = model.synthesize(item["phoneme_ids"], item["note_ids"], item["note_midi"], item["slur_ids"],
                                        durations=item["duration_frames"], seed=seed,
                                        noise_scale=cfg.train.infer_noise_scale if noise_scale is None else noise_scale)
    syn = wave[0, : int(lengths[0])].numpy()
    ref = item["wave"].numpy()
    d = cfg.dsp
    f0_r, v_r = dsp.extract_f0_reference(ref, d.sample_rate, d.f0_min, d.f0_max, d.hop, d.f0_win)
    f0_s, v_s = dsp.extract_f0_reference(syn, d.sample_rate, d.f0_min, d.f0_max, d.hop, d.f0_win)
    out = {"vuv_pct": metric_vuv_error(v_r, v_s), "voiced_ref": float(v_r.mean()), "voiced_syn": float(v_s.mean())}
    try:
        out["f0_corr"] = metric_f0_corr(f0_r, f0_s, v_r, v_s)
        out["f0_rmse_hz"] = metric_f0_rmse(f0_r, f0_s, v_r, v_s)
    except ValueError as e:
        log.warning("F0 metrics undefined: %s", e)
        out["f0_corr"] = out["f0_rmse_hz"] = float("nan")
    out["wave"] = syn
    return out


def run_overfit(data_dir, pitch_net=None, cfg: Config | None = None, steps: int | None = None,
                final_window: int = 50, log_dir=None, progress=None) -> dict:
    """Train on the first utterance of ``data_dir`` and report loss reduction plus resynthesis metrics.

    The final loss is the mean over the last ``final_window`` steps, since
    every step sees a different random segment.
    """
    cfg = cfg or desk_config()
    steps = steps or cfg.train.total_steps
    ds = SingingDataset(data_dir)
    ds.records = ds.records[:1]
    model, disc = build_models(cfg, len(ds.phonemes), len(ds.notes), ds.stats)
    trainer = Trainer(cfg, model, disc, pitch_net if cfg.train.diff_recon else None, 1)
    t0 = time.time()
    history = trainer.fit(batch_iterator(ds, cfg.train.batch_size, cfg.train.seed), steps, log_dir=log_dir,
                          callback=progress)
    losses = np.array([h["L"] for h in history])
    finite = all(math.isfinite(v) for h in history for k, v in h.items() if k != "step")
    final = float(losses[-final_window:].mean())
    report = {"steps": steps, "L0": float(losses[0]), "L_final": final, "reduction": 1.0 - final / losses[0],
              "all_finite": finite, "train_seconds": time.time() - t0, "history": history,
              "terms": sorted(k for k in history[-1] if k.startswith("L_"))}
    report.update(resynthesis_metrics(model, ds))
    report["model"] = model
    return report
