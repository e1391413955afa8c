"""Pretrain the pitch net on synthetic tones and report how well it tracks synthetic singing."""
import argparse
import json
import logging

import numpy as np
import torch

from sifisinger import dsp, pitch, synthetic


def singing_check(net, n=4, seed=5):
    """Cent error of the net against the reference tracker on voiced frames of rendered utterances."""
    rng = np.random.default_rng(seed)
    errs = []
    for i in range(n):
        wave, _ = synthetic.render(synthetic.random_entry(f"chk{i}", rng), rng)
        f0_ref, vuv = dsp.extract_f0_reference(wave)
        with torch.no_grad():
            f0 = pitch.estimate_f0(net, torch.from_numpy(wave)).reshape(-1).numpy()
        idx = pitch._pitch_frames_to_ref(len(f0), net, 512, dsp.SAMPLE_RATE, len(vuv)).numpy()
        m = vuv[idx]
        errs.append(pitch.cents_error(f0[m], f0_ref[idx][m]))
    c = np.concatenate(errs)
    return {"median_cents": float(np.median(c)), "p90_cents": float(np.percentile(c, 90)),
            "acc50": float(np.mean(c < 50))}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--tones", type=int, default=10_000)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    net, info = pitch.pretrain_pitch_net(a.tones, a.epochs, seed=a.seed)
    info["singing"] = singing_check(net)
    pitch.save_pitch_net(net, a.out, info)
    print(json.dumps({"final": info["history"][-1], "singing": info["singing"]}, indent=1))


if __name__ == "__main__":
    main()
