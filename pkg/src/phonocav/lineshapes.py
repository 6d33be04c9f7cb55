"""Spectral lineshapes of a cavity-coupled, phonon-dressed emitter doublet.

All energies are in eV. Lorentzians are parameterized by peak height and
FWHM; the phonon-sideband amplitude carries counts/eV so that every component
evaluates to counts.
"""

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from . import kernels
from .quadrature import integrate

K_B = 8.617333262e-5  # Boltzmann constant, eV/K


@dataclass(frozen=True)
class LorentzianParams:
    center: float
    fwhm: float
    peak: float

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ValueError(f"fwhm must be > 0, got {self.fwhm!r}")
        if not self.peak >= 0:
            raise ValueError(f"peak must be >= 0, got {self.peak!r}")

    @property
    def area(self) -> float:
        return np.pi * self.peak * self.fwhm / 2.0


@dataclass(frozen=True)
class PsbParams:
    center: float
    amplitude: float
    gauss_width: float
    temperature: float = 4.0

    def __post_init__(self):
        if not self.amplitude >= 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude!r}")
        if not self.gauss_width > 0:
            raise ValueError(f"gauss_width must be > 0, got {self.gauss_width!r}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature!r}")

    @property
    def kT(self) -> float:
        return K_B * self.temperature


@dataclass(frozen=True)
class EmitterLine:
    """A zero-phonon Lorentzian and its phonon sideband sharing one center."""

    zpl: LorentzianParams
    psb: PsbParams

    def __post_init__(self):
        if self.zpl.center != self.psb.center:
            raise ValueError("zpl.center and psb.center must be identical")

    @classmethod
    def make(cls, center, zpl_peak, zpl_fwhm, psb_amplitude, psb_width,
             temperature=4.0):
        return cls(LorentzianParams(center, zpl_fwhm, zpl_peak),
                   PsbParams(center, psb_amplitude, psb_width, temperature))

    @property
    def center(self) -> float:
        return self.zpl.center


@dataclass(frozen=True)
class CoupledModelParams:
    """Full parameter set of the coupled doublet + cavity model.

    ``lines[0]`` is the lower-energy line. Both sidebands must share one
    sample temperature.
    """

    lines: tuple
    cavity: LorentzianParams
    alpha: tuple = (0.0, 0.0)
    background: float = 0.0

    def __post_init__(self):
        if len(self.lines) != 2:
            raise ValueError("exactly two emitter lines are required")
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if len(self.alpha) != 2:
            raise ValueError("alpha must have two entries")
        if not self.lines[0].center < self.lines[1].center:
            raise ValueError("lines[0].center must be below lines[1].center")
        if self.lines[0].psb.temperature != self.lines[1].psb.temperature:
            raise ValueError("both sidebands must share one temperature")
        for i, a in enumerate(self.alpha):
            if not a >= -1.0:
                raise ValueError(f"alpha[{i}] must be >= -1, got {a!r}")
        if not self.background >= 0:
            raise ValueError(f"background must be >= 0, got {self.background!r}")

    @property
    def temperature(self) -> float:
        return self.lines[0].psb.temperature

    def with_alpha(self, a1, a2):
        return replace(self, alpha=(a1, a2))

    def pack(self) -> np.ndarray:
        """Packed vector in ``kernels.THETA_FIELDS`` order."""
        l1, l2 = self.lines
        return np.array([
            l1.center, l2.center,
            l1.zpl.peak, l2.zpl.peak,
            l1.zpl.fwhm, l2.zpl.fwhm,
            l1.psb.amplitude, l2.psb.amplitude,
            l1.psb.gauss_width, l2.psb.gauss_width,
            l1.psb.kT,
            self.cavity.center, self.cavity.peak, self.cavity.fwhm,
            self.alpha[0], self.alpha[1],
            self.background,
        ], dtype=np.float64)


def eval_lorentzian(E, p: LorentzianParams):
    return kernels.lorentzian(E, p.center, p.fwhm, p.peak)


def eval_psb(E, p: PsbParams):
    """Acoustic-phonon sideband.

    ``a * exp(-((E-Ex)/g)^2) * |E-Ex| * (H(Ex-E) + n_B(|E-Ex|))`` with the
    removable singularity at ``E == Ex`` replaced by its limit ``a*kB*T``.
    """
    return kernels.psb(E, p.center, p.amplitude, p.gauss_width, p.kT)


def cavity_filter(E, cavity: LorentzianParams):
    """Cavity Lorentzian normalized to 1 at its center."""
    if cavity.peak == 0:
        raise ValueError("cavity peak is zero; normalized filter undefined")
    return kernels.lorentzian(E, cavity.center, cavity.fwhm, 1.0)


def eval_line(E, line: EmitterLine):
    return eval_lorentzian(E, line.zpl) + eval_psb(E, line.psb)


def eval_additive(E, p: CoupledModelParams):
    """Plain sum of both lines, the cavity mode and the background."""
    return (eval_line(E, p.lines[0]) + eval_line(E, p.lines[1])
            + eval_lorentzian(E, p.cavity) + p.background)


def eval_coupled(E, p: CoupledModelParams):
    """Lines weighted by ``1 + alpha_i * I'_c(E)`` plus cavity and background."""
    return kernels.coupled(E, p.pack())


def components(E, p: CoupledModelParams):
    """Per-component arrays for plotting: ``line1``, ``line2``, ``cavity``."""
    filt = kernels.lorentzian(E, p.cavity.center, p.cavity.fwhm, 1.0)
    out = {}
    for i, line in enumerate(p.lines):
        out[f"line{i + 1}"] = eval_line(E, line) * (1.0 + p.alpha[i] * filt)
    out["cavity"] = eval_lorentzian(E, p.cavity)
    return out


def _window(p: CoupledModelParams, halfwidths=20.0):
    lo, hi = [], []
    for line in p.lines:
        for c, hw in ((line.center, line.zpl.fwhm / 2), (line.center, line.psb.gauss_width)):
            lo.append(c - halfwidths * hw)
            hi.append(c + halfwidths * hw)
    c = p.cavity
    lo.append(c.center - halfwidths * c.fwhm / 2)
    hi.append(c.center + halfwidths * c.fwhm / 2)
    return min(lo), max(hi)


def integrate_component(p: CoupledModelParams,
                        which: Literal["cavity", "line1", "line2"],
                        rtol: float = 1e-6) -> float:
    """Integrated intensity of one component over the whole energy axis.

    The window covering 20 half-widths of every component is integrated with
    breakpoints at all centers; the two Lorentzian tails outside it are
    integrated on mapped semi-infinite intervals, so nothing is truncated.

    Raises
    ------
    quadrature.QuadratureError
        When refinement fails, with the achieved error estimate attached.
    """
    if which == "cavity":
        c = p.cavity
        if c.peak == 0:
            return 0.0

        def f(E):
            return kernels.lorentzian(E, c.center, c.fwhm, c.peak)
    elif which in ("line1", "line2"):
        i = int(which[-1]) - 1
        line, alpha, c = p.lines[i], p.alpha[i], p.cavity
        if line.zpl.peak == 0 and line.psb.amplitude == 0:
            return 0.0

        def f(E):
            filt = kernels.lorentzian(E, c.center, c.fwhm, 1.0)
            return eval_line(E, line) * (1.0 + alpha * filt)
    else:
        raise ValueError(f"unknown component {which!r}")

    lo, hi = _window(p)
    centers = [p.cavity.center] + [ln.center for ln in p.lines]
    scale = hi - lo
    # tails carry a small fraction of the total, so the window sets the tolerance
    mid, err = integrate(f, lo, hi, rtol=0.25 * rtol, breakpoints=centers)
    atol = 0.25 * rtol * abs(mid)
    left, _ = integrate(f, -np.inf, lo, rtol=rtol, atol=atol, scale=scale)
    right, _ = integrate(f, hi, np.inf, rtol=rtol, atol=atol, scale=scale)
    return mid + left + right
