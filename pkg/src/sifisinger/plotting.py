"""Spectrogram figure with an F0 contour overlaid on a log-frequency axis."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from . import dsp  # noqa: E402


def plot_spectrogram_pitch(wave, f0, out_path, sample_rate: int = dsp.SAMPLE_RATE, hop: int = 512,
                           fft_size: int = 2048, title: str | None = None, f_range=(50.0, 8000.0)):
    """Write a PNG plus ``<out_path>.json`` holding the plotted contour.

    ``f0`` is frame-aligned with ``hop``; zeros are unvoiced and left out of
    the line.  Output bytes depend only on the inputs and the matplotlib version.
    """
    out_path = Path(out_path)
    x = torch.as_tensor(np.asarray(wave, dtype=np.float32))
    with torch.no_grad():
        mag = dsp.stft_magnitude(x, fft_size, hop, fft_size).numpy().T  # (bins, frames)
    db = 20 * np.log10(np.maximum(mag, 1e-5))
    f0 = np.asarray(f0, dtype=np.float64)
    times = np.arange(db.shape[1]) * hop / sample_rate
    freqs = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    n = min(len(f0), len(times))
    voiced = f0[:n] > 0
    contour = np.where(voiced, f0[:n], np.nan)

    fig, ax = plt.subplots(figsize=(8, 4), dpi=100)
    keep = freqs >= f_range[0] * 0.5
    ax.pcolormesh(times, freqs[keep], db[keep], shading="auto", cmap="magma", vmin=db.max() - 80, vmax=db.max(),
                  rasterized=True)
    ax.plot(times[:n], contour, color="cyan", linewidth=1.2)
    ax.set_yscale("log")
    ax.set_ylim(*f_range)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (Hz)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(out_path, format="png", metadata={"Software": None})
    finally:
        plt.close(fig)
    sidecar = {"hop": hop, "sample_rate": sample_rate,
               "contour": [{"time_s": float(t), "f0_hz": float(f)} for t, f, v in zip(times[:n], f0[:n], voiced) if v]}
    Path(str(out_path) + ".json").write_text(json.dumps(sidecar, indent=1))
    return out_path
