import math

import numpy as np
import pytest
import torch

from conftest import sine
from helpers import directional_fd_check
from sifisinger import pitch
from sifisinger.errors import (CorruptCheckpoint, LengthMismatch, NotNormalized, TooShortSignal, VersionMismatch,
                               WrongSampleRate)

BINS = pitch.PitchBins()


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return pitch.freeze(pitch.PitchNet())


def test_bins_layout():
    c = BINS.cents
    assert len(c) == 360
    assert np.all(np.diff(c) > 0)
    np.testing.assert_allclose(np.diff(c), 20.0)
    assert BINS.centers_hz[0] == pytest.approx(32.70, abs=0.01)


def test_decode_one_hot():
    p = torch.zeros(360, dtype=torch.float64)
    p[100] = 1
    assert float(pitch.decode_f0_weighted(p)) == pytest.approx(BINS.centers_hz[100], rel=1e-9)


def test_decode_uniform_is_mean_cent():
    p = torch.full((360,), 1 / 360, dtype=torch.float64)
    assert float(pitch.decode_f0_weighted(p)) == pytest.approx(pitch.cents_to_hz(BINS.cents.mean()), rel=1e-9)


def test_decode_two_bins_midpoint():
    p = torch.zeros(360, dtype=torch.float64)
    p[[50, 51]] = 0.5
    mid = 0.5 * (BINS.cents[50] + BINS.cents[51])
    assert float(pitch.decode_f0_weighted(p)) == pytest.approx(pitch.cents_to_hz(mid), rel=1e-9)


@pytest.mark.parametrize("k", [1, 5, 30])
def test_decode_shift_by_k_bins(k):
    rng = np.random.default_rng(k)
    p = np.zeros(360)
    p[100:110] = rng.random(10)
    p /= p.sum()
    a = float(pitch.decode_f0_weighted(torch.from_numpy(p)))
    b = float(pitch.decode_f0_weighted(torch.from_numpy(np.roll(p, k))))
    assert b / a == pytest.approx(2 ** (20 * k / 1200), rel=1e-9)


def test_decode_requires_normalised_rows():
    with pytest.raises(NotNormalized):
        pitch.decode_f0_weighted(torch.full((2, 360), 0.01))


def test_probabilities_sum_to_one(net):
    x = torch.randn(2, 4000) * 0.1
    p = pitch.pitch_logits(net, x)
    assert p.shape == (2, 4000 // 160 + 1, 360)
    torch.testing.assert_close(p.sum(-1), torch.ones(p.shape[:2]))


def test_wrong_rate_and_too_short(net):
    with pytest.raises(WrongSampleRate):
        pitch.pitch_logits(net, torch.zeros(4000), sample_rate=44100)
    with pytest.raises(TooShortSignal):
        pitch.pitch_logits(net, torch.zeros(500))


def test_estimate_gradient_reaches_input(net):
    x = torch.randn(1, 8192) * 0.1
    x.requires_grad_(True)
    pitch.estimate_f0(net, x).sum().backward()
    assert x.grad.abs().sum() > 0


def test_frozen_net_has_no_trainable_params(net):
    assert not any(p.requires_grad for p in net.parameters())
    assert not net.training


def test_f0_loss_zero_on_identical(net):
    y = torch.from_numpy(sine(220.0, 0.3)).float()
    assert float(pitch.f0_recon_loss(net, y, y.clone())) == 0.0


def test_f0_loss_linear_in_lambda(net):
    y = torch.from_numpy(sine(220.0, 0.3)).float()
    y_hat = torch.from_numpy(sine(260.0, 0.3)).float()
    vuv = np.ones(len(y) // 512, bool)
    a = float(pitch.f0_recon_loss(net, y, y_hat, 1.0, vuv=vuv))
    b = float(pitch.f0_recon_loss(net, y, y_hat, 3.0, vuv=vuv))
    assert a > 0 and b == pytest.approx(3 * a, rel=1e-6)


def test_f0_loss_unvoiced_frames_masked(net):
    y = torch.from_numpy(sine(220.0, 0.3)).float()
    y_hat = torch.from_numpy(sine(260.0, 0.3)).float()
    assert float(pitch.f0_recon_loss(net, y, y_hat, vuv=np.zeros(len(y) // 512, bool))) == 0.0


def test_f0_loss_length_mismatch(net):
    with pytest.raises(LengthMismatch):
        pitch.f0_recon_loss(net, torch.zeros(1, 8192), torch.zeros(1, 4096), vuv=np.ones(16, bool))


def test_f0_loss_gradient_fd(net):
    net64 = pitch.freeze(pitch.PitchNet()).double()
    net64.load_state_dict(net.state_dict())
    y = torch.from_numpy(sine(200.0, 0.1))
    vuv = np.ones(len(y) // 512, bool)
    x = torch.from_numpy(sine(230.0, 0.1))
    directional_fd_check(lambda v: pitch.f0_recon_loss(net64, y, v, vuv=vuv), x, n_dirs=2, step=1e-6, rtol=1e-2)


def test_mcep_loss_doubling():
    y = torch.from_numpy(np.random.default_rng(0).standard_normal(8192) * 0.1)
    assert float(pitch.mcep_recon_loss(y, y.clone())) == 0.0
    assert float(pitch.mcep_recon_loss(y, 2 * y, lambda_mcep=2.0)) == pytest.approx(2 * math.log(2) / 80, rel=1e-4)


def test_mcep_loss_gradient_fd():
    rng = np.random.default_rng(1)
    y = torch.from_numpy(rng.standard_normal(4096) * 0.1)
    x = torch.from_numpy(rng.standard_normal(4096) * 0.1)
    directional_fd_check(lambda v: pitch.mcep_recon_loss(y, v), x, rtol=1e-3)


def test_mcep_loss_shape_check():
    with pytest.raises(LengthMismatch):
        pitch.mcep_recon_loss(torch.zeros(4096), torch.zeros(4000))


def test_synth_tones_contract():
    audio, f0 = pitch.synth_tones(64, np.random.default_rng(0))
    assert audio.shape == (64, 1024) and audio.dtype == np.float32
    assert np.all((f0 >= 50) & (f0 <= 1000))
    assert np.all(np.isfinite(audio))


def test_soft_targets_peak_at_true_bin():
    t = pitch.soft_targets(np.array([440.0]))
    np.testing.assert_allclose(t.sum(1), 1.0, rtol=1e-6)
    assert abs(BINS.centers_hz[t.argmax()] - 440.0) / 440.0 < 0.012


def test_checkpoint_round_trip(net, tmp_path):
    p = tmp_path / "p.pt"
    pitch.save_pitch_net(net, p)
    again = pitch.load_pitch_net(p)
    x = torch.randn(1, 4000) * 0.1
    assert torch.equal(pitch.pitch_logits(net, x), pitch.pitch_logits(again, x))


def test_checkpoint_corrupt(tmp_path):
    p = tmp_path / "p.pt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CorruptCheckpoint):
        pitch.load_pitch_net(p)


def test_checkpoint_version(net, tmp_path):
    p = tmp_path / "p.pt"
    pitch.save_pitch_net(net, p)
    blob = torch.load(p, weights_only=False)
    blob["schema_version"] = 99
    torch.save(blob, p)
    with pytest.raises(VersionMismatch, match="99"):
        pitch.load_pitch_net(p)


def test_short_pretraining_learns_something():
    net, info = pitch.pretrain_pitch_net(n_tones=600, epochs=2, batch=32, seed=0)
    h = info["history"]
    assert h[-1]["loss"] < h[0]["loss"]
    assert h[-1]["val_median_cents"] < 600
