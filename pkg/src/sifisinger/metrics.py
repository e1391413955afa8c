"""Objective metrics between a reference and a synthesized track of equal frame count."""
import numpy as np

from .errors import DegenerateVariance, NoVoicedOverlap, ShapeMismatch


def _same_length(*arrays):
    n = {len(a) for a in arrays}
    if len(n) != 1:
        raise ShapeMismatch(f"tracks differ in frame count: {[len(a) for a in arrays]}")


def _mutual(f0_ref, f0_syn, vuv_ref, vuv_syn):
    f0_ref, f0_syn = np.asarray(f0_ref, dtype=np.float64), np.asarray(f0_syn, dtype=np.float64)
    vuv_ref = np.asarray(f0_ref > 0 if vuv_ref is None else vuv_ref, dtype=bool)
    vuv_syn = np.asarray(f0_syn > 0 if vuv_syn is None else vuv_syn, dtype=bool)
    _same_length(f0_ref, f0_syn, vuv_ref, vuv_syn)
    both = vuv_ref & vuv_syn
    return f0_ref[both], f0_syn[both]


def metric_f0_rmse(f0_ref, f0_syn, vuv_ref=None, vuv_syn=None) -> float:
    """RMSE in Hz over frames voiced in both tracks."""
    a, b = _mutual(f0_ref, f0_syn, vuv_ref, vuv_syn)
    if len(a) == 0:
        raise NoVoicedOverlap("no frame is voiced in both tracks")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def metric_mel_rmse(mel_ref, mel_syn) -> float:
    """RMSE over two log-mel matrices of identical shape."""
    a, b = np.asarray(mel_ref, dtype=np.float64), np.asarray(mel_syn, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mel shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def metric_f0_corr(f0_ref, f0_syn, vuv_ref=None, vuv_syn=None) -> float:
    """Pearson correlation over frames voiced in both tracks."""
    a, b = _mutual(f0_ref, f0_syn, vuv_ref, vuv_syn)
    if len(a) < 2:
        raise NoVoicedOverlap("need at least two mutually voiced frames")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        raise DegenerateVariance("an F0 track is constant over the mutually voiced frames")
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


def metric_vuv_error(vuv_ref, vuv_syn) -> float:
    """Percentage of frames whose voicing decisions disagree."""
    a, b = np.asarray(vuv_ref, dtype=bool), np.asarray(vuv_syn, dtype=bool)
    _same_length(a, b)
    if len(a) == 0:
        raise ShapeMismatch("empty voicing tracks")
    return float(100.0 * np.mean(a != b))
