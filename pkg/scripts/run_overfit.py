"""Overfit the desk-preset model on one synthetic utterance and score the teacher-forced resynthesis.

Writes losses.{jsonl,csv}, resynth.wav, reference.wav, a spectrogram/pitch plot of each, and report.json.
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from sifisinger import dsp, pitch
from sifisinger.config import apply_overrides, desk_config
from sifisinger.data import SingingDataset
from sifisinger.overfit import make_fixture, run_overfit
from sifisinger.plotting import plot_spectrogram_pitch


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out", type=Path)
    p.add_argument("--pitch-net", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0, help="fixture seed")
    p.add_argument("overrides", nargs="*", help="section.key=value")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = apply_overrides(desk_config(), a.overrides)
    data = make_fixture(a.out / "fixture", a.seed)
    rep = run_overfit(data, pitch.load_pitch_net(a.pitch_net), cfg, a.steps, log_dir=a.out)
    ref = SingingDataset(data)[0]["wave"].numpy()
    for name, wave in (("reference", ref), ("resynth", rep.pop("wave"))):
        dsp.save_wav(a.out / f"{name}.wav", wave)
        f0, _ = dsp.extract_f0_reference(wave)
        plot_spectrogram_pitch(wave, f0, a.out / f"{name}.png", title=name)
    rep.pop("model")
    rep.pop("history")
    (a.out / "report.json").write_text(json.dumps(rep, indent=1))
    print(json.dumps(rep, indent=1))


if __name__ == "__main__":
    main()
