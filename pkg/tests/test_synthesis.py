from dataclasses import replace

import numpy as np
import pytest

from phonocav.synthesis import (REF_ENHANCEMENT, DecayTruth, ScanTruthSpec, StreamTruth,
                                alpha_profile, cavity_peak_profile, energy_grid,
                                enhancement_scan_truth, reference_scan_truth, rng,
                                synth_g2_histogram, synth_scan, time_grid, truth_intensities)


def test_streams_are_independent_and_reproducible():
    a = rng(1, 0).random(5)
    assert np.array_equal(a, rng(1, 0).random(5))
    assert not np.array_equal(a, rng(1, 1).random(5))
    assert not np.array_equal(a, rng(2, 0).random(5))


def test_scan_is_deterministic_per_seed():
    t = reference_scan_truth(seed=3)
    a = synth_scan(t, energy_grid())
    b = synth_scan(reference_scan_truth(seed=3), energy_grid())
    assert all(x == y for x, y in zip(a.spectra, b.spectra))
    c = synth_scan(reference_scan_truth(seed=4), energy_grid())
    assert not all(x == y for x, y in zip(a.spectra, c.spectra))


def test_reference_truth_values():
    t = reference_scan_truth()
    p = t.params[0]
    assert p.lines[1].center - p.lines[0].center == pytest.approx(0.4715e-3)
    assert p.lines[0].psb.gauss_width == 1.2e-3
    assert p.cavity.fwhm == 2.3e-3
    assert p.lines[0].zpl.fwhm == 0.205e-3
    assert len(t.params) == 60
    assert np.all(np.diff(t.cavity_energies) > 0)


def test_truth_profiles_shape():
    spec = ScanTruthSpec()
    d = np.linspace(-6e-3, 3e-3, 2001)
    a = alpha_profile(d, spec, 0)
    assert d[np.argmax(a)] < 0
    c = cavity_peak_profile(d, spec)
    assert d[np.argmax(c)] < 0
    assert cavity_peak_profile(0.0, spec) < cavity_peak_profile(-0.6e-3, spec)


def test_enhancement_truth_ratio():
    t = enhancement_scan_truth()
    inten = truth_intensities(t)
    tot = inten["line1"] + inten["line2"]
    assert tot.max() / tot[0] == pytest.approx(REF_ENHANCEMENT, rel=1e-8)


@pytest.mark.parametrize("field, value", [
    ("spacing", -1.0), ("psb_gamma", 0.0), ("dip_depth", 1.0), ("temperature", 0.0),
    ("exposure", 0.0),
])
def test_scan_spec_validation_names_field(field, value):
    with pytest.raises(ValueError, match=f"'{field}'"):
        reference_scan_truth(replace(ScanTruthSpec(), **{field: value}))


@pytest.mark.parametrize("kw, field", [({"p": 1.5}, "p"), ({"tau1": 0}, "tau1"),
                                       ({"rate": -1}, "rate")])
def test_stream_truth_validation(kw, field):
    with pytest.raises(ValueError, match=f"'{field}'"):
        StreamTruth(**kw)


def test_decay_truth_validation():
    with pytest.raises(ValueError, match="'span'"):
        DecayTruth(span=10.0)
    h = DecayTruth().histogram(seed=1)
    assert h.counts.max() > 300


def test_g2_tail_level():
    h = synth_g2_histogram(StreamTruth(), seed=0)
    tail = np.abs(h.bin_centers) > 50
    assert h.counts[tail].mean() == pytest.approx(100, rel=0.02)
    assert h.meta["n_tail"] == 100


def test_time_grid_symmetric():
    g = time_grid(1.0, 0.1)
    assert g.size == 21 and g[10] == 0.0
