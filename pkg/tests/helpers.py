"""Shared oracles for the test suite."""
import numpy as np
import torch


def directional_fd_check(fn, x, n_dirs=3, step=1e-4, rtol=1e-3, seed=0):
    """Compare autograd directional derivatives of scalar ``fn`` with central differences (float64).

    Returns the worst relative error over ``n_dirs`` random unit directions.
    """
    g = torch.Generator().manual_seed(seed)
    x = x.detach().to(torch.float64).requires_grad_(True)
    y = fn(x)
    (grad,) = torch.autograd.grad(y, x)
    assert torch.isfinite(grad).all()
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_dirs):
            v = torch.randn(x.shape, generator=g, dtype=torch.float64)
            v /= v.norm()
            fd = (fn(x + step * v) - fn(x - step * v)) / (2 * step)
            ad = (grad * v).sum()
            err = abs(float(fd - ad)) / max(abs(float(fd)), abs(float(ad)), 1e-12)
            worst = max(worst, err)
    assert worst < rtol, f"directional derivative mismatch {worst:.2e} >= {rtol}"
    return worst


def weighted_sum(out, seed=1):
    """Fixed random projection of a tensor to a scalar, so the check sees every output entry."""
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * w).sum()


def peak_hz(x, sr):
    spec = np.abs(np.fft.rfft(x))
    return np.argmax(spec) * sr / len(x)
