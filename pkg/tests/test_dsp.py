import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import sine
from helpers import directional_fd_check, peak_hz, weighted_sum
from sifisinger import dsp
from sifisinger.errors import DegenerateDimension, TooShortSignal, UnsupportedRatio, WrongSampleRate

SR = 44100


def noise(n, seed=0, scale=0.1):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(n) * scale)


# -- STFT -------------------------------------------------------------------

def test_stft_peak_bin_for_1khz():
    mag = dsp.stft_magnitude(torch.from_numpy(sine(1000.0)))
    assert int(mag[10:-10].mean(0).argmax()) == round(1000 / (SR / 2048)) == 46


def test_stft_frame_count_and_centering():
    x = torch.zeros(SR)
    assert dsp.stft_magnitude(x).shape == (SR // 512, 1025)
    # an impulse at sample t*hop peaks in frame t
    imp = torch.zeros(8192)
    imp[10 * 512] = 1.0
    energy = dsp.stft_magnitude(imp).sum(-1)
    assert int(energy.argmax()) == 10


def test_stft_zero_signal():
    assert torch.count_nonzero(dsp.stft_magnitude(torch.zeros(4096))) == 0


def test_stft_too_short():
    with pytest.raises(TooShortSignal):
        dsp.stft_magnitude(torch.zeros(1000))


def test_stft_gradient_matches_fd():
    x = noise(2048, 1)
    directional_fd_check(lambda v: dsp.stft_magnitude(v).sum(), x, rtol=1e-4)


# -- mel --------------------------------------------------------------------

def test_white_noise_mel_is_flat():
    mel = dsp.mel_spectrogram(noise(SR * 2, 2)).numpy()
    db = 20 / math.log(10) * mel.mean(0)
    assert db.max() - db.min() < 20.0


def test_silence_mel_is_floor():
    mel = dsp.mel_spectrogram(torch.zeros(4096))
    assert torch.allclose(mel, torch.full_like(mel, math.log(1e-5)))


def test_mel_deterministic():
    x = noise(8192, 3)
    assert torch.equal(dsp.mel_spectrogram(x), dsp.mel_spectrogram(x.clone()))


def test_mel_filterbank_area_normalised():
    fb = dsp.mel_filterbank(SR, 2048, 80, 0.0, 22050.0)
    hz_per_bin = SR / 2048
    area = fb.sum(1) * hz_per_bin
    np.testing.assert_allclose(area[5:], 1.0, rtol=0.05)


def test_mel_gradient_matches_fd():
    directional_fd_check(lambda v: weighted_sum(dsp.mel_spectrogram(v)), noise(2048, 4))


# -- mcep -------------------------------------------------------------------

def test_mcep_shape():
    assert dsp.extract_mcep(noise(SR, 5).float()).shape == (SR // 512, 80)


@pytest.mark.parametrize("g", [0.5, 2.0, 3.0])
def test_mcep_gain_additivity(g):
    x = noise(8192, 6)
    a, b = dsp.extract_mcep(x), dsp.extract_mcep(g * x)
    np.testing.assert_allclose((b[:, 0] - a[:, 0]).numpy(), math.log(g), atol=1e-5)
    np.testing.assert_allclose(b[:, 1:].numpy(), a[:, 1:].numpy(), atol=1e-6)


def test_white_noise_mcep_flat():
    c = dsp.extract_mcep(noise(SR * 2, 7)).numpy()
    assert np.abs(c[:, 1:].mean(0)).max() < 0.1 * abs(c[:, 0].mean())


def test_mcep_tracks_spectral_envelope():
    # a one-pole lowpass tilts the spectrum: c1 is positive (energy at low frequency)
    x = noise(SR, 8).numpy()
    y = np.zeros_like(x)
    for i in range(1, len(x)):
        y[i] = 0.9 * y[i - 1] + x[i]
    assert dsp.extract_mcep(torch.from_numpy(y))[:, 1].mean() > 0.5


def test_mcep_gradient_three_frames():
    cfg = dsp.DSPConfig(fft_size=256, win_length=256, hop=128)
    x = noise(3 * 128, 9)
    assert dsp.extract_mcep(x, cfg).shape == (3, 80)
    directional_fd_check(lambda v: weighted_sum(dsp.extract_mcep(v, cfg)), x)


def test_mcep_gradient_default_config():
    directional_fd_check(lambda v: weighted_sum(dsp.extract_mcep(v)), noise(4096, 10))


def test_warp_maps_endpoints():
    np.testing.assert_allclose(dsp.warp_frequency([0.0, math.pi], 0.55), [0.0, math.pi], atol=1e-12)


# -- reference F0 -----------------------------------------------------------

@pytest.mark.parametrize("freq", [110.0, 220.0, 440.0, 880.0])
def test_f0_on_tones(freq):
    f0, vuv = dsp.extract_f0_reference(sine(freq))
    interior = slice(4, -4)
    assert vuv[interior].all()
    assert np.mean(np.abs(f0[interior] - freq) <= 2.0) >= 0.9


def test_f0_noise_is_unvoiced():
    x = np.random.default_rng(11).standard_normal(SR) * 0.01
    _, vuv = dsp.extract_f0_reference(x)
    assert vuv.mean() < 0.2


def test_f0_silence():
    f0, vuv = dsp.extract_f0_reference(np.zeros(SR))
    assert not vuv.any() and not f0.any()


@given(st.floats(60.0, 950.0), st.floats(0.05, 0.9))
def test_f0_contract(freq, amp):
    f0, vuv = dsp.extract_f0_reference(sine(freq, 0.3, amp=amp), f_min=55.0, f_max=1000.0)
    assert np.array_equal(f0 == 0, ~vuv)
    assert np.all((f0[vuv] >= 55.0) & (f0[vuv] <= 1000.0))


def test_f0_bad_range():
    with pytest.raises(ValueError):
        dsp.extract_f0_reference(np.zeros(4096), f_min=20.0)


# -- resampling -------------------------------------------------------------

def test_resample_length():
    assert dsp.resample(torch.zeros(441), SR, 16000).shape == (160,)


def test_resample_preserves_1khz():
    y = dsp.resample(torch.from_numpy(sine(1000.0)), SR, 16000).numpy()
    seg = y[4000:4000 + 1024] * np.hanning(1024)
    assert abs(peak_hz(seg, 16000) - 1000.0) <= 16000 / 1024


def test_resample_identity():
    x = noise(1000, 12)
    torch.testing.assert_close(dsp.resample(x, SR, SR), x, atol=1e-6, rtol=0)


def test_resample_unsupported():
    with pytest.raises(UnsupportedRatio):
        dsp.resample(torch.zeros(100), 44100.5, 16000)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_resample_linear(a, b, seed):
    x, y = noise(700, seed), noise(700, seed + 1)
    lhs = dsp.resample(a * x + b * y, SR, 16000)
    rhs = a * dsp.resample(x, SR, 16000) + b * dsp.resample(y, SR, 16000)
    torch.testing.assert_close(lhs, rhs, atol=1e-6, rtol=0)


def test_resample_gradient():
    directional_fd_check(lambda v: weighted_sum(dsp.resample(v, SR, 16000)), noise(2048, 13))


# -- features, normalisation, I/O ------------------------------------------

def _feats(rng, n=50):
    lf0 = np.where(rng.random(n) < 0.7, rng.uniform(4.5, 6.5, n), 0.0)
    return dsp.AcousticFeatures(rng.standard_normal((n, 80)) * 3 + 1, lf0, lf0 != 0)


def test_norm_stats_standardise(rng):
    feats = [_feats(rng) for _ in range(4)]
    stats = dsp.fit_norm_stats(feats)
    normed = np.concatenate([dsp.apply_norm(f, stats).mcep for f in feats]).astype(np.float64)
    assert np.abs(normed.mean(0)).max() < 1e-6
    assert np.abs(normed.std(0) - 1).max() < 1e-6


def test_norm_round_trip(rng):
    f = _feats(rng)
    stats = dsp.fit_norm_stats([f, _feats(rng)])
    back = dsp.invert_norm(dsp.apply_norm(f, stats), stats)
    assert np.abs(back.mcep - f.mcep).max() < 1e-5 * max(1.0, np.abs(f.mcep).max())
    assert np.abs(back.log_f0 - f.log_f0).max() < 1e-6
    assert np.array_equal(back.vuv, f.vuv)


def test_norm_constant_dimension(rng):
    f = _feats(rng)
    f.mcep[:, 5] = 2.0
    with pytest.raises(DegenerateDimension):
        dsp.fit_norm_stats([f])


def test_norm_stats_json(tmp_path, rng):
    stats = dsp.fit_norm_stats([_feats(rng)])
    stats.save(tmp_path / "s.json")
    again = dsp.NormStats.load(tmp_path / "s.json")
    np.testing.assert_array_equal(again.mcep_std, stats.mcep_std)
    assert again.lf0_mean == stats.lf0_mean


def test_features_invariants():
    with pytest.raises(ValueError):
        dsp.AcousticFeatures(np.zeros((3, 79)), np.zeros(3), np.zeros(3, bool))
    with pytest.raises(ValueError):
        dsp.AcousticFeatures(np.zeros((3, 80)), np.array([0, 5.0, 0]), np.zeros(3, bool))


def test_extract_features_alignment():
    f = dsp.extract_features(sine(220.0, 0.5))
    assert f.mcep.shape == (int(0.5 * SR) // 512, 80)
    assert f.vuv[3:-3].all()
    np.testing.assert_allclose(np.exp(f.log_f0[5:-5]), 220.0, atol=2.0)


def test_external_f0_override():
    f0 = np.full(20, 300.0)
    f0[:5] = 0
    f = dsp.extract_features(np.zeros(20 * 512, np.float32) + 1e-3, f0_hz=f0)
    assert f.vuv.tolist() == [False] * 5 + [True] * 15


def test_wav_round_trip(tmp_path):
    x = sine(440.0, 0.1)
    dsp.save_wav(tmp_path / "a.wav", x)
    w = dsp.load_wav(tmp_path / "a.wav")
    assert w.sample_rate == SR
    assert np.abs(w.samples - x).max() <= 1.0 / 32767


def test_wav_wrong_rate(tmp_path):
    dsp.save_wav(tmp_path / "a.wav", np.zeros(100), 16000)
    with pytest.raises(WrongSampleRate):
        dsp.load_wav(tmp_path / "a.wav")
