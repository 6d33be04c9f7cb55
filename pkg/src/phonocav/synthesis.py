"""Synthetic data with known ground truth.

Every generator draws Poisson counts around the expectation returned by the
same evaluator the fits use (``lineshapes.eval_coupled``,
``timedomain.g2_convolved``, ``timedomain.decay_convolved``,
``timedomain.irf_binned``), so a fit recovering the truth tests the whole
path.

Random numbers come from numpy's Philox-4x64 counter-based generator keyed
by ``SeedSequence([seed, stream])``; ``stream`` is the spectrum index for
scans and 0 otherwise, so outputs depend only on (truth, seed).
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .data import (CONSOLIDATION_WINDOW, MASK_MAX_ENERGY, CorrelationHistogram,
                   DetuningScan, Spectrum)
from .lineshapes import (CoupledModelParams, EmitterLine, LorentzianParams,
                         eval_coupled, eval_psb, integrate_component, PsbParams)
from .scan import CavityDispersion
from .timedomain import IrfModel, decay_convolved, g2_convolved, irf_binned

# Emitter and cavity values consolidated for the doublet emitter (eV)
REF_SPACING = 0.4715e-3
REF_PSB_GAMMA = 1.20e-3
REF_CAVITY_FWHM = 2.30e-3
REF_ZPL_FWHM = 0.205e-3
REF_TEMPERATURE = 4.0
# single-photon source values
REF_G2_0 = 0.27
REF_TAU1 = 1.954       # ns
REF_JITTER = 0.5       # ns
REF_ENHANCEMENT = 17.0
TARGET_MIN_COUNTS = 100


def rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def energy_grid(lo=1.925, hi=1.955, step=0.04e-3) -> np.ndarray:
    n = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(n)


def synth_spectrum(truth: CoupledModelParams, grid, exposure: float = 1.0,
                   seed: int = 0, stream: int = 0) -> Spectrum:
    """Poisson counts around ``exposure * eval_coupled(grid)``."""
    grid = np.asarray(grid, dtype=np.float64)
    lam = exposure * eval_coupled(grid, truth)
    counts = rng(seed, stream).poisson(lam).astype(np.float64)
    return Spectrum(grid, counts)


# ---------------------------------------------------------------------------
# scans

@dataclass
class ScanTruth:
    params: list
    dispersion: CavityDispersion
    noise_seed: int = 0
    exposure: float = 1.0
    scan_coord: np.ndarray | None = None
    temperature: float = REF_TEMPERATURE
    fit_mask_max_energy: float = MASK_MAX_ENERGY
    consolidation_window: tuple = CONSOLIDATION_WINDOW
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.exposure > 0:
            raise ValueError("exposure must be > 0")
        for i, p in enumerate(self.params):
            if not isinstance(p, CoupledModelParams):
                raise TypeError(f"params[{i}] is not CoupledModelParams")

    @property
    def cavity_energies(self) -> np.ndarray:
        return np.array([p.cavity.center for p in self.params])

    @property
    def emitter_center(self) -> float:
        l1, l2 = self.params[0].lines
        return 0.5 * (l1.center + l2.center)


def synth_scan(truth: ScanTruth, grid) -> DetuningScan:
    """One Poisson spectrum per scan step, stream ``i`` for step ``i``."""
    spectra = [synth_spectrum(p, grid, truth.exposure, truth.noise_seed, i)
               for i, p in enumerate(truth.params)]
    return DetuningScan(spectra, truth.scan_coord, truth.temperature,
                        truth.fit_mask_max_energy, truth.consolidation_window)


@dataclass
class ScanTruthSpec:
    """Knobs of the reference doublet scan.

    The cavity intensity follows the sideband spectral density at the cavity
    energy (phonon-assisted feeding), on top of a constant leaky part, and is
    suppressed near zero detuning. Coupling factors rise on a Gaussian bump
    at negative detuning.
    """

    n_steps: int = 60
    ex1: float = 1.9478
    spacing: float = REF_SPACING
    zpl_peak: float = 1500.0
    zpl_fwhm: float = REF_ZPL_FWHM
    psb_a: float = 4.0e5
    psb_gamma: float = REF_PSB_GAMMA
    temperature: float = REF_TEMPERATURE
    cavity_fwhm: float = REF_CAVITY_FWHM
    background: float = 20.0
    # E_c(i) = c0 + c1 i + c2 i^2
    dispersion: tuple = (1.9300, 3.8e-4, -5.0e-7)
    cavity_leak: float = 150.0
    cavity_fed: float = 300.0
    dip_depth: float = 0.7
    dip_width: float = 0.4e-3
    alpha_base: tuple = (0.0, 0.0)
    alpha_resonant: tuple = (2.0, 2.0)
    alpha_resonant_width: float = 1.0e-3
    alpha_bump: tuple = (4.0, 4.0)
    alpha_bump_center: float = -2.5e-3
    alpha_bump_width: float = 1.0e-3
    exposure: float = 1.0

    def validate(self):
        checks = {
            "n_steps": self.n_steps >= 1,
            "spacing": self.spacing > 0,
            "zpl_peak": self.zpl_peak >= 0,
            "zpl_fwhm": self.zpl_fwhm > 0,
            "psb_a": self.psb_a >= 0,
            "psb_gamma": self.psb_gamma > 0,
            "temperature": self.temperature > 0,
            "cavity_fwhm": self.cavity_fwhm > 0,
            "background": self.background >= 0,
            "cavity_leak": self.cavity_leak >= 0,
            "cavity_fed": self.cavity_fed >= 0,
            "dip_depth": 0 <= self.dip_depth < 1,
            "dip_width": self.dip_width > 0,
            "alpha_base": all(a >= -1 for a in self.alpha_base),
            "exposure": self.exposure > 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid truth field {name!r}: {getattr(self, name)!r}")


def _feeding_profile(detuning, spec: ScanTruthSpec):
    """Sideband density at the cavity energy, normalized to its maximum."""
    ps = PsbParams(0.0, 1.0, spec.psb_gamma, spec.temperature)
    d = np.linspace(-5 * spec.psb_gamma, 5 * spec.psb_gamma, 4001)
    smax = float(eval_psb(d, ps).max())
    return eval_psb(np.asarray(detuning, dtype=np.float64), ps) / smax


def cavity_peak_profile(detuning, spec: ScanTruthSpec):
    """Truth cavity peak height as a function of ``E_c - E_x`` (eV)."""
    d = np.asarray(detuning, dtype=np.float64)
    dip = 1.0 - spec.dip_depth * np.exp(-(d / spec.dip_width) ** 2)
    return (spec.cavity_leak + spec.cavity_fed * _feeding_profile(d, spec)) * dip


def alpha_profile(detuning, spec: ScanTruthSpec, line: int):
    d = np.asarray(detuning, dtype=np.float64)
    bump = np.exp(-((d - spec.alpha_bump_center) / spec.alpha_bump_width) ** 2)
    res = np.exp(-(d / spec.alpha_resonant_width) ** 2)
    return (spec.alpha_base[line] + spec.alpha_resonant[line] * res
            + spec.alpha_bump[line] * bump)


def reference_scan_truth(spec: ScanTruthSpec | None = None, seed: int = 0) -> ScanTruth:
    """Doublet scan with the consolidated emitter values as ground truth."""
    spec = spec or ScanTruthSpec()
    spec.validate()
    disp = CavityDispersion(np.array(spec.dispersion, dtype=np.float64), 0.0)
    idx = np.arange(spec.n_steps)
    E_c = disp(idx)
    ex1, ex2 = spec.ex1, spec.ex1 + spec.spacing
    ex_mean = 0.5 * (ex1 + ex2)
    lines = tuple(EmitterLine.make(c, spec.zpl_peak, spec.zpl_fwhm, spec.psb_a,
                                   spec.psb_gamma, spec.temperature) for c in (ex1, ex2))
    params = []
    for e in E_c:
        peak = float(cavity_peak_profile(e - ex_mean, spec))
        a1 = float(alpha_profile(e - ex1, spec, 0))
        a2 = float(alpha_profile(e - ex2, spec, 1))
        params.append(CoupledModelParams(
            lines, LorentzianParams(float(e), spec.cavity_fwhm, peak), (a1, a2),
            spec.background))
    info = {"spec": spec, "kind": "reference-scan"}
    return ScanTruth(params, disp, seed, spec.exposure, idx.astype(np.float64),
                     spec.temperature, info=info)


def truth_intensities(truth: ScanTruth) -> dict:
    """Integrated component intensities of the truth, per spectrum."""
    out = {"cavity": [], "line1": [], "line2": []}
    for p in truth.params:
        for k in out:
            out[k].append(integrate_component(p, k))
    return {k: np.array(v) for k, v in out.items()}


def enhancement_scan_truth(enhancement: float = REF_ENHANCEMENT, n_steps: int = 60,
                           seed: int = 0, spec: ScanTruthSpec | None = None) -> ScanTruth:
    """Scan whose total line intensity peaks at ``enhancement`` times its most
    red-detuned (leaky) value.

    The emitter is one fine-structure doublet with no sideband-assisted bump
    in the coupling; the resonant coupling amplitude is found by root finding
    so that the truth ratio equals ``enhancement``.
    """
    base = spec or ScanTruthSpec(n_steps=n_steps, alpha_bump=(0.0, 0.0))

    def truth(a):
        return reference_scan_truth(replace(base, alpha_resonant=(a, a)), seed)

    def ratio(a):
        tot = [integrate_component(p, "line1") + integrate_component(p, "line2")
               for p in truth(a).params]
        return max(tot) / tot[0]

    a = brentq(lambda a: ratio(a) - enhancement, 0.0, 1e3, xtol=1e-10)
    t = truth(a)
    t.info.update(kind="enhancement-scan", enhancement=enhancement, alpha=a)
    return t


# ---------------------------------------------------------------------------
# photon statistics

@dataclass
class StreamTruth:
    p: float = 1.0 - REF_G2_0
    tau1: float = REF_TAU1
    rate: float = 5.0e4          # counts/s per detector
    irf: IrfModel = field(default_factory=lambda: IrfModel(0.0, REF_JITTER, 0.0))
    target_min_counts: float = TARGET_MIN_COUNTS
    t0: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"invalid truth field 'p': {self.p!r}")
        if not self.tau1 > 0:
            raise ValueError(f"invalid truth field 'tau1': {self.tau1!r}")
        if not self.rate > 0:
            raise ValueError(f"invalid truth field 'rate': {self.rate!r}")
        if not self.target_min_counts > 0:
            raise ValueError(
                f"invalid truth field 'target_min_counts': {self.target_min_counts!r}")


def time_grid(span, bin_width=0.1, start=None) -> np.ndarray:
    """Bin centers ``k * bin_width`` covering ``[-span, span]`` (or ``[start, span]``)."""
    lo = -span if start is None else start
    k0 = int(round(lo / bin_width))
    k1 = int(round(span / bin_width))
    return np.arange(k0, k1 + 1) * bin_width


def synth_g2_histogram(truth: StreamTruth, bin_width: float = 0.1, span: float = 100.0,
                       seed: int = 0, center: str = "location") -> CorrelationHistogram:
    """Coincidence histogram whose uncorrelated level is ``target_min_counts``."""
    tau = time_grid(span, bin_width)
    n_tail = truth.target_min_counts
    lam = n_tail * g2_convolved(tau, truth.p, truth.tau1, truth.t0, truth.irf, bin_width,
                                center=center)
    counts = rng(seed).poisson(np.maximum(lam, 0.0))
    integration_s = n_tail / (truth.rate ** 2 * bin_width * 1e-9)
    return CorrelationHistogram(tau, counts, bin_width,
                                meta={"n_tail": n_tail, "integration_s": integration_s})


def synth_decay_histogram(tau1: float, irf: IrfModel, peak_counts: float = TARGET_MIN_COUNTS,
                          seed: int = 0, bin_width: float = 0.1, t0: float = 5.0,
                          span: float = 50.0, baseline: float = 0.0,
                          center: str = "location") -> CorrelationHistogram:
    """Pulsed-excitation decay histogram with ``peak_counts`` expected in the top bin."""
    if not tau1 > 0:
        raise ValueError("tau1 must be > 0")
    t = time_grid(span, bin_width, start=0.0)
    unit = decay_convolved(t, 1.0, tau1, t0, 0.0, irf, bin_width, center=center)
    amp = peak_counts / unit.max()
    lam = amp * unit + baseline
    counts = rng(seed).poisson(np.maximum(lam, 0.0))
    return CorrelationHistogram(t, counts, bin_width,
                                meta={"amplitude": amp, "t0": t0, "baseline": baseline})


def synth_irf_histogram(irf: IrfModel, total_counts: float = 2e4, seed: int = 0,
                        bin_width: float = 0.1, span: float = 10.0) -> CorrelationHistogram:
    """Laser-pulse histogram: ``total_counts`` spread by the IRF density."""
    t = time_grid(irf.location + span, bin_width, start=irf.location - span)
    lam = total_counts * bin_width * irf_binned(t, irf, bin_width)
    return CorrelationHistogram(t, rng(seed).poisson(np.maximum(lam, 0.0)), bin_width)


@dataclass
class DecayTruth:
    """Pulsed decay measurement: lifetime, response, counts in the top bin."""

    tau1: float = REF_TAU1
    irf: IrfModel = field(default_factory=lambda: IrfModel(0.0, REF_JITTER, 2.0))
    peak_counts: float = 400.0
    t0: float = 5.0
    baseline: float = 0.5
    bin_width: float = 0.1
    span: float = 50.0

    def __post_init__(self):
        checks = {
            "tau1": self.tau1 > 0,
            "peak_counts": self.peak_counts > 0,
            "baseline": self.baseline >= 0,
            "bin_width": self.bin_width > 0,
            "span": self.span > self.t0 + 5 * self.tau1,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid truth field {name!r}: {getattr(self, name)!r}")

    def histogram(self, seed: int = 0) -> CorrelationHistogram:
        return synth_decay_histogram(self.tau1, self.irf, self.peak_counts, seed,
                                     self.bin_width, self.t0, self.span, self.baseline)
