import math

import numpy as np
import pytest
from scipy import stats

from phonocav import timedomain as td
from phonocav.data import CorrelationHistogram
from phonocav.synthesis import (StreamTruth, synth_decay_histogram, synth_g2_histogram,
                                synth_irf_histogram, time_grid)
from phonocav.timedomain import (IrfModel, convolve_with_irf, decay_convolved, fit_g2,
                                 fit_irf, fit_lifetime, g2_convolved, g2_ideal,
                                 normalize_g2, skew_gaussian_density)

IRF = IrfModel(0.0, 0.5, 2.0)


def brute_force_binned(model, irf, tau, bw, n_sub=100, n_s=4001):
    """Bin averages of the IRF convolution by dense midpoint sums, 100x oversampled."""
    s = np.linspace(irf.location - 8 * irf.scale, irf.location + 14 * irf.scale, n_s)
    ds = s[1] - s[0]
    rho = skew_gaussian_density(s, irf) * ds
    rho /= rho.sum()
    offs = (np.arange(n_sub) + 0.5) / n_sub * bw - 0.5 * bw
    out = np.empty(tau.size)
    for i, t in enumerate(tau):
        tt = t + offs
        out[i] = (model(tt[:, None] - (s[None, :] - irf.location)) @ rho).mean()
    return out


# 25-digit nested quadrature of the bin-averaged convolution,
# p = 0.73, tau1 = 1.954 ns, t0 = 0.1 ns, IRF (0, 0.5 ns, 2), 0.1 ns bins
@pytest.mark.parametrize("tau, expected", [
    (-1.0, 0.64813912506813046),
    (0.0, 0.42056454004472919),
    (0.5, 0.36502491109411412),
    (2.0, 0.66306956175651615),
    (10.0, 0.99438326999848831),
])
def test_g2_convolved_frozen(tau, expected):
    grid = np.round(np.arange(-300, 301) * 0.1, 10)
    v = g2_convolved(grid, 0.73, 1.954, 0.1, IRF, 0.1)
    assert v[np.argmin(np.abs(grid - tau))] == pytest.approx(expected, rel=1e-5)


@pytest.mark.parametrize("irf", [IRF, IrfModel(0.3, 0.2, -3.0), IrfModel(0.0, 1.0, 0.0)])
def test_convolution_matches_brute_force(irf):
    tau = np.round(np.arange(-60, 61) * 0.1, 10)
    fast = g2_convolved(tau, 0.73, 1.954, 0.0, irf, 0.1)
    slow = brute_force_binned(lambda t: g2_ideal(t, 0.73, 1.954), irf, tau, 0.1)
    np.testing.assert_allclose(fast, slow, rtol=1e-4)


def test_direct_and_fft_routes_agree(monkeypatch):
    tau = time_grid(30.0, 0.1)
    monkeypatch.setattr(td, "_DIRECT_LIMIT", 0)
    via_fft = g2_convolved(tau, 0.73, 1.954, 0.2, IRF, 0.1)
    monkeypatch.setattr(td, "_DIRECT_LIMIT", 10 ** 12)
    direct = g2_convolved(tau, 0.73, 1.954, 0.2, IRF, 0.1)
    np.testing.assert_allclose(direct, via_fft, rtol=1e-12, atol=1e-13)


def test_skew_density_matches_scipy():
    t = np.linspace(-3, 5, 201)
    for irf in (IRF, IrfModel(1.0, 0.3, -4.0)):
        ref = stats.skewnorm.pdf(t, irf.shape, loc=irf.location, scale=irf.scale)
        np.testing.assert_allclose(skew_gaussian_density(t, irf), ref, rtol=1e-12, atol=1e-300)
        assert irf.mean == pytest.approx(
            stats.skewnorm.mean(irf.shape, loc=irf.location, scale=irf.scale), rel=1e-12)


def test_constant_is_preserved_and_support_checked():
    grid = time_grid(10.0, 0.1)
    v = convolve_with_irf(lambda t: np.full_like(t, 3.0), IRF, grid)
    np.testing.assert_allclose(v, 3.0, rtol=1e-12)
    with pytest.raises(ValueError, match="does not span"):
        convolve_with_irf(lambda t: t, IRF, grid, support=(-9.0, 9.0))


def test_decay_integral_is_amplitude_times_tau():
    t = time_grid(60.0, 0.05, start=0.0)
    y = decay_convolved(t, 10.0, 1.954, 5.0, 0.0, IRF, 0.05)
    assert y.sum() * 0.05 == pytest.approx(10.0 * 1.954, rel=1e-6)


def test_irf_validation():
    with pytest.raises(ValueError):
        IrfModel(0.0, 0.0)
    assert IRF.shifted(1.0).location == 1.0


def test_normalize_g2_errors():
    tau = time_grid(30.0, 0.1)
    hist = CorrelationHistogram(tau, np.full(tau.size, 100))
    with pytest.raises(ValueError, match="holds"):
        normalize_g2(hist, (50.0, 100.0))
    with pytest.raises(ValueError, match="10 x tau1"):
        normalize_g2(hist, (5.0, 30.0), tau1_prior=2.0)


def test_flat_histogram_gives_g2_one():
    tau = time_grid(100.0, 0.1)
    counts = np.random.default_rng(4).poisson(100.0, tau.size)
    res = fit_g2(CorrelationHistogram(tau, counts), IRF)
    assert abs(res.g2_0 - 1.0) <= 3 * res.g2_0_sigma + 0.02


def test_g2_recovery_single_seed():
    hist = synth_g2_histogram(StreamTruth(), seed=11)
    res = fit_g2(hist, IrfModel(0.0, 0.5, 0.0))
    assert abs(res.g2_0 - 0.27) < 3 * res.g2_0_sigma
    assert res.g2_0_sigma <= 0.10


def test_fit_irf_recovers_truth():
    truth = IrfModel(1.0, 0.5, 2.0)
    est = fit_irf(synth_irf_histogram(truth, total_counts=5e4, seed=2))
    assert est.scale == pytest.approx(0.5, abs=4 * est.sigmas["scale"])
    assert est.location == pytest.approx(1.0, abs=4 * est.sigmas["location"])
    assert est.shape == pytest.approx(2.0, abs=4 * est.sigmas["shape"])


def test_lifetime_recovery_and_short_window():
    hist = synth_decay_histogram(1.954, IRF, 400, seed=5, baseline=0.5)
    res = fit_lifetime(hist, IRF)
    assert abs(res.tau1 - 1.954) < 3 * res.sigma and res.sigma < 0.05
    short = CorrelationHistogram(hist.bin_centers[:80], hist.counts[:80], hist.bin_width)
    with pytest.raises(ValueError, match="after the pulse"):
        fit_lifetime(short, IRF)


def test_g2_ideal_limits():
    assert g2_ideal(0.0, 0.73, 2.0) == pytest.approx(0.27)
    assert g2_ideal(1e3, 0.73, 2.0) == pytest.approx(1.0)
    assert g2_ideal(-1.0, 0.5, 1.0) == pytest.approx(1 - 0.5 / math.e)
