import math
from dataclasses import replace

import numpy as np
import pytest

from phonocav.data import DetuningScan, Spectrum
from phonocav.fitting import WeightedSample
from phonocav.lineshapes import integrate_component
from phonocav.scan import (PreconditionError, ScanConfig, ScanPipelineError,
                           _weighted_polyfit, consolidate_shared, extract_cavity_dispersion,
                           fit_scan, fit_stage_a, fit_stage_c, zpl_fwhm_sensitivity)
from phonocav.synthesis import energy_grid, reference_scan_truth, synth_scan


@pytest.fixture(scope="module")
def truth():
    return reference_scan_truth(seed=0)


@pytest.fixture(scope="module")
def scan(truth):
    return synth_scan(truth, energy_grid())


@pytest.fixture(scope="module")
def report(scan):
    return fit_scan(scan)


def test_dispersion_tracks_truth(scan, truth):
    disp = extract_cavity_dispersion(scan)
    idx = np.arange(len(scan))
    err = disp(idx) - truth.cavity_energies
    assert np.max(np.abs(err)) < 30e-6
    assert disp.covariance.shape == (3, 3)
    assert len(disp.detected) >= 0.6 * len(scan)


def test_report_is_complete(report):
    assert report.converged
    assert len(report.records) == 60
    assert len(report.window_indices) >= 2
    assert all(i in report.stage_a_indices for i in report.window_indices)


def test_cavity_intensity_closed_form(report):
    for r in report.records:
        c = r.params.cavity
        assert r.cavity_intensity == pytest.approx(math.pi * c.peak * c.fwhm / 2, rel=1e-6)


def test_detuning_strictly_monotone(report):
    d = report.column("detuning")
    assert np.all(np.diff(d) > 0)


def test_shared_parameters_close_to_truth(report):
    sh = report.shared
    for name, value in (("spacing", 0.4715e-3), ("psb_gamma", 1.2e-3),
                        ("cavity_fwhm", 2.3e-3)):
        ws = getattr(sh, name)
        assert abs(ws.value - value) < 3 * ws.sigma, name
    assert abs(report.zpl_fwhm.value - 0.205e-3) < 3 * report.zpl_fwhm.sigma
    assert report.zpl_fwhm_stat_sigma <= report.zpl_fwhm.sigma


def test_deterministic_and_thread_independent(scan, report):
    other = fit_scan(scan, ScanConfig(threads=3))
    for a, b in zip(report.records, other.records):
        assert a.fit.estimates == b.fit.estimates
        assert a.cavity_intensity == b.cavity_intensity
    assert report.zpl_fwhm == other.zpl_fwhm


def test_stage_a_requires_red_detuning(scan, truth):
    i = 50  # cavity on the blue side of the emitter
    with pytest.raises(PreconditionError, match="red-detuned"):
        fit_stage_a(scan.spectra[i], truth.cavity_energies[i])


def test_consolidation_needs_two_fits(report):
    pairs = [(i, report.records[i].stage_a) for i in report.window_indices[:1]]
    with pytest.raises(ValueError, match="need >= 2"):
        consolidate_shared(pairs, report.window)


def test_window_outside_scan_is_stage_tagged(scan):
    with pytest.raises(ScanPipelineError) as info:
        fit_scan(scan, ScanConfig(window=(1.80, 1.81)))
    assert info.value.stage == "dispersion"
    assert info.value.partial is not None


def test_flat_scan_fails_in_dispersion():
    E = energy_grid()
    rng = np.random.default_rng(0)
    flat = DetuningScan([Spectrum(E, rng.poisson(50, E.size)) for _ in range(10)])
    with pytest.raises(ScanPipelineError, match=r"\[dispersion\]"):
        fit_scan(flat)


def test_config_validation():
    with pytest.raises(ValueError):
        ScanConfig(dispersion_degree=4)
    with pytest.raises(ValueError):
        ScanConfig(threads=0)


def test_thread_default_from_environment(monkeypatch):
    monkeypatch.setenv("PHONOCAV_THREADS", "3")
    assert ScanConfig().threads == 3


def test_weighted_polyfit_matches_numpy():
    rng = np.random.default_rng(1)
    x = np.arange(30)
    s = rng.uniform(0.5, 2, x.size)
    y = 1 + 0.1 * x - 0.01 * x ** 2 + rng.normal(0, s)
    coef, cov, _ = _weighted_polyfit(x, y, s, 2)
    ref = np.polynomial.polynomial.polyfit(x, y, 2, w=1 / s)
    np.testing.assert_allclose(coef, ref, rtol=1e-9)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_zpl_sensitivity_matches_refit(scan, report):
    # implicit-function derivative vs a finite-difference refit in psb_gamma
    i = report.window_indices[0]
    rec = report.records[i]
    g = zpl_fwhm_sensitivity(scan.spectra[i], rec.fit)
    h = 2e-6
    vals = []
    for sgn in (-1, 1):
        sh = replace(report.shared, psb_gamma=WeightedSample(
            report.shared.psb_gamma.value + sgn * h, report.shared.psb_gamma.sigma))
        r = fit_stage_c(scan.spectra[i], sh, rec.cavity_energy,
                        zpl_fwhm_seed=rec.fit["zpl_fwhm"], center_seed=rec.fit["center"])
        vals.append(r["zpl_fwhm"])
    fd = (vals[1] - vals[0]) / (2 * h)
    assert g[3] == pytest.approx(fd, rel=0.1)


def test_line_intensities_positive(report):
    for r in report.records:
        assert r.line1_intensity > 0 and r.line2_intensity > 0
        assert r.line1_intensity == pytest.approx(integrate_component(r.params, "line1"))


def test_dispersion_degree_option(scan):
    d1 = extract_cavity_dispersion(scan, degree=3)
    assert d1.degree == 3
    with pytest.raises(ValueError):
        extract_cavity_dispersion(scan, degree=5)

