import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phonocav.lineshapes import (K_B, CoupledModelParams, EmitterLine, LorentzianParams,
                                 PsbParams, components, eval_additive, eval_coupled,
                                 eval_lorentzian, eval_psb, integrate_component)

REF_PSB = PsbParams(1.9478, 4e5, 1.2e-3, 4.0)


def make_params(alpha=(2.0, 0.0), cav=(1.945, 2.3e-3, 300.0), background=20.0):
    l1 = EmitterLine.make(1.9478, 1500, 2.05e-4, 4e5, 1.2e-3, 4.0)
    l2 = EmitterLine.make(1.94827, 1500, 2.05e-4, 4e5, 1.2e-3, 4.0)
    return CoupledModelParams((l1, l2), LorentzianParams(*cav), alpha, background)


# 40-digit evaluation of a exp(-(d/g)^2) |d| (theta(-d) + n_B(|d|))
@pytest.mark.parametrize("E, expected", [
    (1.9460, 76.299178478440414992),
    (1.9475, 193.96323311419671885),
    (1.94779, 139.87728845024211072),
    (1.9478, 137.877332192),
    (1.94781, 135.87756621837505003),
    (1.9485, 30.096232370041132031),
    (1.9500, 0.051716322919033286098),
])
def test_psb_frozen_values(E, expected):
    assert eval_psb(np.array([E]), REF_PSB)[0] == pytest.approx(expected, rel=1e-10)


@given(st.floats(1e-6, 5e-3), st.floats(0.5, 300.0))
def test_psb_detailed_balance(delta, T):
    p = PsbParams(1.9478, 1.0, 1.2e-3, T)
    lo, hi = eval_psb(np.array([p.center - delta, p.center + delta]), p)
    if hi == 0.0:
        return  # anti-Stokes side underflows for delta >> kT
    assert lo / hi == pytest.approx(math.exp(delta / (K_B * T)), rel=1e-9)


@given(st.floats(-5e-3, 5e-3), st.floats(0.5, 300.0))
def test_psb_non_negative_and_finite(d, T):
    v = eval_psb(np.array([1.9478 + d]), PsbParams(1.9478, 1.0, 1.2e-3, T))[0]
    assert math.isfinite(v) and v >= 0


def test_lorentzian_peak_and_half_width():
    p = LorentzianParams(1.94, 2e-3, 7.0)
    v = eval_lorentzian(np.array([1.94, 1.941, 1.939]), p)
    np.testing.assert_allclose(v, [7.0, 3.5, 3.5], rtol=1e-12)
    assert p.area == pytest.approx(math.pi * 7.0 * 2e-3 / 2)


@given(st.lists(st.floats(1.92, 1.97), min_size=1, max_size=30),
       st.floats(1.93, 1.96), st.floats(0, 1e3), st.floats(0, 100))
def test_coupled_reduces_to_additive_at_zero_alpha(E, cav_c, cav_peak, bg):
    p = make_params(alpha=(0.0, 0.0), cav=(cav_c, 2.3e-3, cav_peak), background=bg)
    E = np.array(E)
    np.testing.assert_allclose(eval_coupled(E, p), eval_additive(E, p), rtol=1e-12)


def test_components_sum_to_total():
    p = make_params()
    E = np.linspace(1.925, 1.955, 301)
    c = components(E, p)
    np.testing.assert_allclose(c["line1"] + c["line2"] + c["cavity"] + p.background,
                               eval_coupled(E, p), rtol=1e-12)


def test_line_integral_frozen():
    # 30-digit adaptive quadrature of (ZPL + PSB)(1 + alpha I'_c) over the real line
    assert integrate_component(make_params(), "line1") == pytest.approx(
        1.2802554273985862, rel=1e-9)


@given(st.floats(1.93, 1.96), st.floats(1e-4, 5e-3), st.floats(1e-3, 1e4))
def test_cavity_integral_closed_form(c, fwhm, peak):
    p = make_params(cav=(c, fwhm, peak))
    assert integrate_component(p, "cavity") == pytest.approx(math.pi * peak * fwhm / 2,
                                                             rel=1e-6)


def test_integral_grows_with_alpha():
    assert (integrate_component(make_params(alpha=(3.0, 0.0)), "line1")
            > integrate_component(make_params(alpha=(0.0, 0.0)), "line1"))


def test_zero_components_integrate_to_zero():
    p = make_params(cav=(1.945, 2.3e-3, 0.0))
    assert integrate_component(p, "cavity") == 0.0
    with pytest.raises(ValueError, match="unknown component"):
        integrate_component(p, "line3")


@pytest.mark.parametrize("build, match", [
    (lambda: LorentzianParams(1.9, 0.0, 1.0), "fwhm"),
    (lambda: LorentzianParams(1.9, 1e-3, -1.0), "peak"),
    (lambda: PsbParams(1.9, 1.0, 1e-3, 0.0), "temperature"),
    (lambda: PsbParams(1.9, -1.0, 1e-3, 4.0), "amplitude"),
    (lambda: make_params(alpha=(-1.5, 0.0)), "alpha"),
    (lambda: make_params(background=-1.0), "background"),
])
def test_validation(build, match):
    with pytest.raises(ValueError, match=match):
        build()


def test_lines_must_be_ordered():
    l1 = EmitterLine.make(1.9478, 1, 1e-4, 1, 1e-3)
    l2 = EmitterLine.make(1.9470, 1, 1e-4, 1, 1e-3)
    with pytest.raises(ValueError, match="below"):
        CoupledModelParams((l1, l2), LorentzianParams(1.94, 1e-3, 1.0))


def test_pack_layout():
    from phonocav.kernels import THETA_FIELDS
    p = make_params()
    theta = dict(zip(THETA_FIELDS, p.pack()))
    assert theta["ex2"] == 1.94827
    assert theta["kT"] == pytest.approx(K_B * 4.0)
    assert theta["alpha1"] == 2.0
