"""Staged fit of a cavity detuning scan.

1. Extract the cavity resonance for every spectrum from a smooth polynomial
   through the detected cavity peaks (``extract_cavity_dispersion``).
2. Fit the additive model to every significantly red-detuned spectrum
   (``fit_stage_a``).
3. Consolidate the shared emitter and cavity properties as inverse-variance
   weighted averages over spectra whose cavity lies inside the consolidation
   window (``consolidate_shared``).
4. Fit the coupled model to every spectrum with the shared quantities fixed
   (``fit_stage_c``) and integrate each component.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
import os
import warnings

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import least_squares as robust_lsq, lsq_linear, nnls

from . import kernels
from .data import DetuningScan, Spectrum
from .fitting import (_jacobian, FitError, FitResult, ParamSpec, WeightedSample,
                      least_squares, poisson_least_squares, weighted_average)
from .lineshapes import (K_B, CoupledModelParams, EmitterLine, LorentzianParams,
                         integrate_component)

_logger = logging.getLogger(__name__)

ALPHA_BOUNDS = (-1.0, 1e4)
SHARED_FIELDS = ("spacing", "zpl_peak", "psb_a", "psb_gamma", "cavity_fwhm", "background")
# model parameter name of each shared field
_FIT_NAME = {"cavity_fwhm": "cav_fwhm"}

# seeds, eV
ZPL_FWHM_SEED = 0.3e-3
PSB_GAMMA_SEED = 1.0e-3
CAVITY_FWHM_SEED = 2.0e-3
ROUGH_TOLERANCE = 1.5e-3   # refined cavity peak vs first-pass dispersion


class ScanPipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``partial`` holds what was done."""

    def __init__(self, stage, message, partial=None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.partial = partial


class PreconditionError(ValueError):
    pass


@dataclass
class ScanConfig:
    red_detuned_factor: float = 2.0       # stage A needs E_c - E_x < -factor * FWHM_c
    dispersion_degree: int = 2
    exclusion_half_width: float = 3e-3    # eV around the emitter, no cavity detection
    min_detect_fraction: float = 0.6
    detect_significance: float = 5.0
    mask_max_energy: float | None = None  # overrides the scan's value
    window: tuple | None = None           # overrides the scan's value
    threads: int | None = None
    max_iter: int = 200
    poisson_ml: bool = True               # model-variance reweighting for count data

    def __post_init__(self):
        if not 1 <= self.dispersion_degree <= 3:
            raise ValueError("dispersion_degree must be 1, 2 or 3")
        if self.threads is None:
            self.threads = int(os.environ.get("PHONOCAV_THREADS", "1"))
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class CavityDispersion:
    """Polynomial ``E_c(index)``; coefficients are lowest order first."""

    coefficients: np.ndarray
    rms: float
    detected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    peak_energies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fwhm_estimate: float = math.nan
    emitter_estimate: tuple = (math.nan, math.nan)
    covariance: np.ndarray | None = None   # of the coefficients

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if not 0 <= self.coefficients.size - 1 <= 3:
            raise ValueError("dispersion polynomial degree must be <= 3")
        if not math.isfinite(self.rms):
            raise ValueError("rms must be finite")

    @property
    def degree(self) -> int:
        return self.coefficients.size - 1

    def __call__(self, index):
        return P.polyval(np.asarray(index, dtype=np.float64), self.coefficients)


@dataclass
class SharedParams:
    spacing: WeightedSample
    zpl_peak: WeightedSample
    psb_a: WeightedSample
    psb_gamma: WeightedSample
    cavity_fwhm: WeightedSample
    background: WeightedSample
    zpl_fwhm_stage_a: WeightedSample
    center: WeightedSample
    used: list = field(default_factory=list)
    covariance: np.ndarray | None = None   # joint covariance over SHARED_FIELDS

    def __post_init__(self):
        if not self.spacing.value > 0:
            raise ValueError("consolidated spacing must be > 0")


@dataclass
class SpectrumRecord:
    index: int
    scan_coord: float
    cavity_energy: float
    detuning: float
    fit: FitResult | None
    cavity_intensity: float = math.nan
    line1_intensity: float = math.nan
    line2_intensity: float = math.nan
    alpha1: float = math.nan
    alpha2: float = math.nan
    stage_a: FitResult | None = None
    params: CoupledModelParams | None = None


@dataclass
class ScanFitReport:
    records: list
    shared: SharedParams | None
    zpl_fwhm: WeightedSample | None         # sigma includes the shared-parameter part
    dispersion: CavityDispersion | None
    stage_a_indices: list
    window_indices: list
    config: ScanConfig
    temperature: float
    mask_max_energy: float
    window: tuple
    zpl_fwhm_stat_sigma: float = math.nan

    @property
    def converged(self) -> bool:
        fits = [r.fit for r in self.records] + [r.stage_a for r in self.records if r.stage_a]
        return all(f is not None and f.converged for f in fits)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)


# ---------------------------------------------------------------------------
# model plumbing

def _theta(v, kT):
    half = 0.5 * v["spacing"]
    return np.array([
        v["center"] - half, v["center"] + half,
        v["zpl_peak"], v["zpl_peak"],
        v["zpl_fwhm"], v["zpl_fwhm"],
        v["psb_a"], v["psb_a"],
        v["psb_gamma"], v["psb_gamma"],
        kT,
        v["cav_center"], v["cav_peak"], v["cav_fwhm"],
        v["alpha1"], v["alpha2"],
        v["background"],
    ])


def _model(kT):
    def f(E, v):
        return kernels.coupled(E, _theta(v, kT))
    return f


def params_from_values(v, temperature) -> CoupledModelParams:
    """Build model parameters from a fit's estimate dictionary."""
    half = 0.5 * v["spacing"]
    lines = tuple(
        EmitterLine.make(c, v["zpl_peak"], v["zpl_fwhm"], v["psb_a"], v["psb_gamma"],
                         temperature)
        for c in (v["center"] - half, v["center"] + half))
    # peak 0 would make the normalized filter undefined; keep the cavity shape
    cav = LorentzianParams(v["cav_center"], v["cav_fwhm"], max(v["cav_peak"], 0.0))
    a1 = max(v["alpha1"], -1.0)
    a2 = max(v["alpha2"], -1.0)
    return CoupledModelParams(lines, cav, (a1, a2), max(v["background"], 0.0))


def _local_maxima(y):
    return np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:])) + 1


def _emitter_seeds(E, y, exclude=None, min_sep=2):
    """Energies of the two highest local maxima, sorted ascending."""
    idx = _local_maxima(y)
    if exclude is not None:
        idx = idx[~exclude[idx]]
    if idx.size == 0:
        idx = np.array([int(np.argmax(y))])
    order = idx[np.argsort(y[idx])[::-1]]
    first = order[0]
    second = next((j for j in order[1:] if abs(j - first) >= min_sep), None)
    if second is None:
        return float(E[first]), None
    return tuple(sorted((float(E[first]), float(E[second]))))


# ---------------------------------------------------------------------------
# stage 1: cavity dispersion

def _refine_cavity_peak(E, y, e0, fwhm0, noise, usable):
    """Lorentzian + linear background fit around a detected maximum.

    ``y`` is a background-subtracted spectrum, ``noise`` its standard
    deviation and ``usable`` the points that may enter the fit. Returns
    ``(center, center_sigma, fwhm)`` or ``None`` when the fit fails.
    """
    sel = usable & (np.abs(E - e0) <= 1.5 * fwhm0)
    if sel.sum() < 8:
        return None
    x, d = E[sel], y[sel]
    params = [
        ParamSpec("center", e0, e0 - fwhm0, e0 + fwhm0),
        ParamSpec("fwhm", fwhm0, 0.2 * fwhm0, 5 * fwhm0),
        ParamSpec("peak", max(float(d.max()), 1.0), 0.0),
        ParamSpec("base", 0.0),
        ParamSpec("slope", 0.0),
    ]

    def f(E_, v):
        return (kernels.lorentzian(E_, v["center"], v["fwhm"], v["peak"])
                + v["base"] + v["slope"] * (E_ - e0))

    try:
        r = least_squares(f, params, x, d, sigma=noise[sel], max_iter=100, quiet=True)
    except FitError:
        return None
    if not r.converged:
        return None
    sig = r.sigmas["center"]
    if not (sig > 0 and math.isfinite(sig)):
        return None
    # a maximum at the edge of the usable region is usually sideband structure
    core = np.abs(E - r["center"]) <= 0.5 * fwhm0
    if not core.any() or not usable[core].all():
        return None
    return r["center"], sig, r["fwhm"]


def _detect_peaks(E, Y, baseline, region, config):
    """Per-spectrum cavity maximum in ``Y - baseline`` restricted to ``region``."""
    peaks = []
    for y, base in zip(Y, baseline):
        resid = (y - base) / np.sqrt(np.maximum(base, 1.0))
        cand = np.where(region, resid, -np.inf)
        j = int(np.argmax(cand))
        ok = (np.isfinite(cand[j]) and cand[j] >= config.detect_significance
              and 0 < j < E.size - 1 and region[j - 1] and region[j + 1])
        if ok:
            # prominence of a broad feature: smooth over a few points
            k = slice(max(j - 3, 0), j + 4)
            ok = float(np.mean(resid[k])) >= 0.5 * config.detect_significance
        peaks.append(j if ok else None)
    return peaks


def _far_baseline(E, Y, rough_ec, fwhm):
    """Per-spectrum static background: at each energy, the median over spectra
    whose cavity lies more than ``4 * fwhm`` away from that energy."""
    far = np.abs(E[None, :] - rough_ec[:, None]) > 4.0 * fwhm   # (n_spec, n_E)
    masked = np.where(far, Y, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns use the fallback
        base = np.nanmedian(masked, axis=0)
    fallback = np.median(Y, axis=0)
    base = np.where(np.isfinite(base), base, fallback)
    return np.broadcast_to(base, Y.shape)


def extract_cavity_dispersion(scan: DetuningScan, config: ScanConfig | None = None,
                              degree: int | None = None) -> CavityDispersion:
    """Detect the cavity peak per spectrum and fit a smooth polynomial through it.

    A first pass finds the maxima of each spectrum minus the scan-median
    spectrum, outside a band of ``exclusion_half_width`` around the emitter.
    A second pass subtracts, at every energy, the median of only those
    spectra whose cavity is far away, and refines each peak with a
    Lorentzian on a linear background. The polynomial in scan index is fitted
    with weights from the refined center uncertainties.
    """
    config = config or ScanConfig()
    deg = config.dispersion_degree if degree is None else degree
    if not 1 <= deg <= 3:
        raise ValueError("dispersion degree must be 1, 2 or 3")
    E = scan.energy
    max_e = config.mask_max_energy or scan.fit_mask_max_energy
    inmask = E <= max_e
    Y = scan.counts
    n = len(Y)
    median = np.median(Y, axis=0)

    seeds = _emitter_seeds(E[inmask], median[inmask])
    ex = seeds if seeds[1] is not None else (seeds[0], seeds[0])
    ex_mean = 0.5 * (ex[0] + ex[1])
    band = np.abs(E - ex_mean) <= config.exclusion_half_width
    region = inmask & ~band

    first = _detect_peaks(E, Y, np.broadcast_to(median, Y.shape), region, config)
    hits = [i for i, j in enumerate(first) if j is not None]
    if len(hits) < max(config.min_detect_fraction * n, deg + 1):
        missing = [i for i, j in enumerate(first) if j is None]
        raise ValueError(
            f"cavity peak detected in {len(hits)}/{n} spectra "
            f"(need {config.min_detect_fraction:.0%}); undetected: {missing}")
    hx = np.array(hits)
    hy = E[[first[i] for i in hits]]
    hs = np.full(hx.size, CAVITY_FWHM_SEED / 4)
    ok = _robust_inliers(hx, hy, hs, deg)
    rough = P.polyfit(hx[ok].astype(np.float64), hy[ok], deg)
    rough_ec = P.polyval(np.arange(n, dtype=np.float64), rough)
    baseline = _far_baseline(E, Y, rough_ec, CAVITY_FWHM_SEED)

    second = _detect_peaks(E, Y, baseline, region, config)
    detected, centers, csig, widths, missing = [], [], [], [], []
    for i, j in enumerate(second):
        out = None
        if j is not None:
            out = _refine_cavity_peak(E, Y[i] - baseline[i], float(E[j]), CAVITY_FWHM_SEED,
                                      np.sqrt(np.maximum(Y[i], 1.0)), region)
        if out is None or abs(out[0] - rough_ec[i]) > ROUGH_TOLERANCE:
            missing.append(i)
            continue
        detected.append(i)
        centers.append(out[0])
        csig.append(out[1])
        widths.append(out[2])

    if len(detected) < config.min_detect_fraction * n or len(detected) < deg + 1:
        raise ValueError(
            f"cavity peak detected in {len(detected)}/{n} spectra "
            f"(need {config.min_detect_fraction:.0%}); undetected: {missing}")
    idx = np.array(detected)
    centers = np.array(centers)
    csig = np.array(csig)
    # spurious maxima (e.g. sideband structure near the band edge) can claim small
    # errors; judge them against a robust fit before the final weighted one
    keep = _robust_inliers(idx, centers, csig, deg)
    coef, cov, _ = _weighted_polyfit(idx[keep], centers[keep], csig[keep], deg)
    if (~keep).any():
        _logger.info("dispersion: rejected outlying peaks in spectra %s", idx[~keep].tolist())
    missing = sorted(missing + idx[~keep].tolist())
    idx, centers, widths = idx[keep], centers[keep], np.array(widths)[keep]
    if idx.size < config.min_detect_fraction * n:
        raise ValueError(
            f"cavity peak detected in {idx.size}/{n} spectra after outlier rejection "
            f"(need {config.min_detect_fraction:.0%}); undetected: {missing}")
    rms = float(np.sqrt(np.mean((P.polyval(idx, coef) - centers) ** 2)))
    return CavityDispersion(coef, rms, idx, centers, float(np.median(widths)),
                            (float(ex[0]), float(ex[1])), cov)


def _robust_inliers(x, y, sigma, deg, cut=5.0):
    """Points within ``cut`` robust standard deviations of a Cauchy-loss polynomial fit."""
    V = P.polyvander(x.astype(np.float64), deg) / sigma[:, None]
    start, *_ = np.linalg.lstsq(V, y / sigma, rcond=None)
    sol = robust_lsq(lambda c: V @ c - y / sigma, start, loss="cauchy", f_scale=2.0,
                     x_scale="jac")
    z = V @ sol.x - y / sigma
    scale = max(1.4826 * float(np.median(np.abs(z))), 1.0)
    return np.abs(z) <= cut * scale


def _weighted_polyfit(x, y, sigma, deg):
    """Weighted polynomial fit; returns (coef, covariance, normalized residuals)."""
    V = P.polyvander(x.astype(np.float64), deg) / sigma[:, None]
    coef, *_ = np.linalg.lstsq(V, y / sigma, rcond=None)
    z = (P.polyval(x, coef) - y) / sigma
    dof = max(x.size - (deg + 1), 1)
    cov = np.linalg.inv(V.T @ V) * max(float(z @ z) / dof, 1.0)
    return coef, 0.5 * (cov + cov.T), z


# ---------------------------------------------------------------------------
# stage A

def _solve(model, params, E, y, sigma, max_iter, poisson_ml):
    if sigma is None and poisson_ml:
        return poisson_least_squares(model, params, E, y, max_iter=max_iter)
    return least_squares(model, params, E, y, sigma=sigma, max_iter=max_iter)


def _base_params(E_c):
    return [
        ParamSpec("cav_center", E_c, fixed=True),
        ParamSpec("alpha1", 0.0, fixed=True),
        ParamSpec("alpha2", 0.0, fixed=True),
    ]


def _linear_columns(E, v, kT, names):
    """Unit-amplitude basis columns for the linear parameters ``names``."""
    cols = []
    for nm in names:
        w = dict(v)
        for other in ("zpl_peak", "psb_a", "cav_peak", "background", "alpha1", "alpha2"):
            w[other] = 0.0
        if nm in ("alpha1", "alpha2"):
            # line_i * I'_c, with the line at its current amplitude
            i = int(nm[-1]) - 1
            base = dict(v, cav_peak=0.0, background=0.0, alpha1=0.0, alpha2=0.0)
            th = _theta(base, kT)
            line = (kernels.lorentzian(E, th[i], th[4 + i], th[2 + i])
                    + kernels.psb(E, th[i], th[6 + i], th[8 + i], kT))
            cols.append(line * kernels.lorentzian(E, v["cav_center"], v["cav_fwhm"], 1.0))
            continue
        w[nm] = 1.0
        cols.append(kernels.coupled(E, _theta(w, kT)))
    return np.column_stack(cols)


def fit_stage_a(spectrum: Spectrum, E_c: float, temperature: float = 4.0,
                mask_max_energy: float = 1.951, cavity_fwhm: float = 2.3e-3,
                red_detuned_factor: float = 2.0, init: list | None = None,
                max_iter: int = 200, poisson_ml: bool = True) -> FitResult:
    """Additive-model fit of one red-detuned spectrum with the cavity energy fixed.

    Free parameters: mean line center, line spacing, ZPL peak and FWHM,
    sideband amplitude and width (all shared by both lines), cavity peak and
    FWHM, and the background.

    Raises
    ------
    PreconditionError
        If the cavity is not red-detuned by more than
        ``red_detuned_factor * cavity_fwhm`` from the emitter.
    """
    kT = K_B * temperature
    E = spectrum.energy
    m = E <= mask_max_energy
    Em, ym = E[m], spectrum.counts[m]
    sig = None if spectrum.sigma is None else spectrum.sigma[m]

    if init is None:
        near_cav = np.abs(Em - E_c) < cavity_fwhm
        seeds = _emitter_seeds(Em, ym, exclude=near_cav)
        e1, e2 = seeds if seeds[1] is not None else (seeds[0] - 0.25e-3, seeds[0] + 0.25e-3)
        center, spacing = 0.5 * (e1 + e2), max(e2 - e1, 1e-5)
    else:
        iv = {p.name: p.init for p in init}
        center, spacing = iv["center"], iv["spacing"]

    detuning = E_c - center
    if not detuning < -red_detuned_factor * cavity_fwhm:
        raise PreconditionError(
            f"cavity not significantly red-detuned: E_c - E_x = {detuning * 1e3:.3f} meV "
            f"(need < {-red_detuned_factor * cavity_fwhm * 1e3:.3f} meV)")

    if init is None:
        v = dict(center=center, spacing=spacing, zpl_fwhm=ZPL_FWHM_SEED,
                 psb_gamma=PSB_GAMMA_SEED, cav_center=E_c, cav_fwhm=CAVITY_FWHM_SEED,
                 alpha1=0.0, alpha2=0.0)
        lin = ("zpl_peak", "psb_a", "cav_peak", "background")
        A = _linear_columns(Em, v, kT, lin)
        w = 1.0 / np.sqrt(np.maximum(ym, 1.0))
        amp, _ = nnls(A * w[:, None], ym * w)
        amp = dict(zip(lin, amp))
        scale = max(float(ym.max()), 1.0)
        init = [
            ParamSpec("center", center),
            ParamSpec("spacing", spacing, 1e-6, 5e-3),
            ParamSpec("zpl_peak", max(amp["zpl_peak"], 1e-3 * scale), 0.0),
            ParamSpec("zpl_fwhm", ZPL_FWHM_SEED, 1e-6, 5e-3),
            ParamSpec("psb_a", max(amp["psb_a"], 1e-3 * scale / 1e-3), 0.0),
            ParamSpec("psb_gamma", PSB_GAMMA_SEED, 1e-5, 1e-2),
            ParamSpec("cav_peak", max(amp["cav_peak"], 1e-3 * scale), 0.0),
            ParamSpec("cav_fwhm", CAVITY_FWHM_SEED, 1e-4, 2e-2),
            ParamSpec("background", max(amp["background"], 1e-2), 0.0),
        ] + _base_params(E_c)
    return _solve(_model(kT), init, Em, ym, sig, max_iter, poisson_ml)


# ---------------------------------------------------------------------------
# consolidation

def consolidate_shared(stage_a: list, window: tuple) -> SharedParams:
    """Inverse-variance weighted averages over stage-A fits with E_c in ``window``.

    ``stage_a`` holds FitResults (or ``(index, FitResult)`` pairs); the cavity
    energy of each is read from its fixed ``cav_center`` estimate.
    """
    pairs = [(i, r) if not isinstance(r, tuple) else r for i, r in enumerate(stage_a)]
    pairs = [(i, r) for i, r in pairs if r is not None]
    lo, hi = window
    sel = [(i, r) for i, r in pairs if lo <= r["cav_center"] <= hi]
    if len(sel) < 2:
        avail = sorted(r["cav_center"] for _, r in pairs)
        near = sorted(avail, key=lambda e: min(abs(e - lo), abs(e - hi)))[:4]
        raise ValueError(
            f"{len(sel)} stage-A results with E_c in [{lo:.5f}, {hi:.5f}] eV (need >= 2); "
            f"nearest available E_c: {[round(e, 6) for e in sorted(near)]}")

    def avg(name):
        samples = []
        for _, r in sel:
            s = r.sigmas[name]
            if not (s > 0 and math.isfinite(s)):
                raise ValueError(f"non-positive uncertainty for {name!r} in stage-A fit")
            samples.append(WeightedSample(r[name], s))
        return weighted_average(samples)

    return SharedParams(
        spacing=avg("spacing"), zpl_peak=avg("zpl_peak"), psb_a=avg("psb_a"),
        psb_gamma=avg("psb_gamma"), cavity_fwhm=avg("cav_fwhm"),
        background=avg("background"), zpl_fwhm_stage_a=avg("zpl_fwhm"),
        center=avg("center"), used=[i for i, _ in sel],
        covariance=_consolidated_covariance([r for _, r in sel]))


def _consolidated_covariance(results) -> np.ndarray:
    """Covariance of the per-field weighted averages, spectra taken as independent."""
    names = [_FIT_NAME.get(k, k) for k in SHARED_FIELDS]
    k = len(names)
    num = np.zeros((k, k))
    wsum = np.zeros(k)
    for r in results:
        pos = [r.free_names.index(nm) for nm in names]
        C = r.covariance[np.ix_(pos, pos)]
        w = 1.0 / np.diag(C)
        num += np.outer(w, w) * C
        wsum += w
    cov = num / np.outer(wsum, wsum)
    return 0.5 * (cov + cov.T)


def zpl_fwhm_sensitivity(spectrum: Spectrum, res: FitResult, temperature: float = 4.0,
                         mask_max_energy: float = 1.951) -> np.ndarray:
    """Derivative of a stage-C ZPL FWHM estimate with respect to its fixed inputs.

    Uses the implicit-function rule at the optimum,
    ``d theta / d s = -(J^T W J)^-1 J^T W J_s``, with Poisson weights from the
    fitted model (or the spectrum's sigma). Ordered as ``SHARED_FIELDS``
    followed by the preset cavity energy.
    """
    kT = K_B * temperature
    E = spectrum.energy
    m = E <= mask_max_energy
    Em = E[m]
    f = _model(kT)
    base = dict(res.estimates)
    if spectrum.sigma is None:
        w = 1.0 / np.maximum(f(Em, base), 1.0)
    else:
        w = 1.0 / spectrum.sigma[m] ** 2

    def jac(names):
        x0 = np.array([base[n] for n in names])

        def fun(x):
            return f(Em, dict(base, **dict(zip(names, x))))
        return _jacobian(fun, x0, np.where(x0 != 0, np.abs(x0), 1.0))

    Jf = jac(res.free_names)
    Js = jac([_FIT_NAME.get(k, k) for k in SHARED_FIELDS] + ["cav_center"])
    A = Jf.T @ (w[:, None] * Jf)
    D = -np.linalg.solve(A, Jf.T @ (w[:, None] * Js))
    return D[res.free_names.index("zpl_fwhm")]


# ---------------------------------------------------------------------------
# stage C

def fit_stage_c(spectrum: Spectrum, shared: SharedParams, E_c: float,
                temperature: float = 4.0, mask_max_energy: float = 1.951,
                zpl_fwhm_seed: float | None = None, center_seed: float | None = None,
                max_iter: int = 200, poisson_ml: bool = True) -> FitResult:
    """Coupled-model fit with the shared quantities fixed.

    Free parameters: ZPL FWHM (common to both lines), mean line center, cavity
    peak, and the coupling factors ``alpha1``/``alpha2`` bounded to
    ``ALPHA_BOUNDS``.
    """
    for nm in SHARED_FIELDS:
        if not math.isfinite(getattr(shared, nm).value):
            raise ValueError(f"shared {nm} is not finite")
    kT = K_B * temperature
    E = spectrum.energy
    m = E <= mask_max_energy
    Em, ym = E[m], spectrum.counts[m]
    sig = None if spectrum.sigma is None else spectrum.sigma[m]

    fwhm0 = zpl_fwhm_seed if zpl_fwhm_seed is not None else shared.zpl_fwhm_stage_a.value
    center0 = center_seed if center_seed is not None else shared.center.value
    v = dict(center=center0, spacing=shared.spacing.value, zpl_peak=shared.zpl_peak.value,
             zpl_fwhm=fwhm0, psb_a=shared.psb_a.value, psb_gamma=shared.psb_gamma.value,
             cav_center=E_c, cav_peak=0.0, cav_fwhm=shared.cavity_fwhm.value,
             alpha1=0.0, alpha2=0.0, background=shared.background.value)

    # the model is linear in (cav_peak, alpha1, alpha2): seed them by bounded LSQ
    lin = ("cav_peak", "alpha1", "alpha2")
    A = _linear_columns(Em, v, kT, lin)
    fixed_part = kernels.coupled(Em, _theta(v, kT))
    w = 1.0 / np.sqrt(np.maximum(ym, 1.0) if sig is None else sig ** 2)
    lo_b = [0.0, ALPHA_BOUNDS[0], ALPHA_BOUNDS[0]]
    hi_b = [np.inf, ALPHA_BOUNDS[1], ALPHA_BOUNDS[1]]
    sol = lsq_linear(A * w[:, None], (ym - fixed_part) * w, bounds=(lo_b, hi_b))
    cav0, a10, a20 = (float(s) for s in sol.x)
    clip = lambda a: min(max(a, ALPHA_BOUNDS[0] + 1e-6), ALPHA_BOUNDS[1] - 1.0)
    scale = max(float(ym.max()), 1.0)

    params = [
        ParamSpec("center", center0),
        ParamSpec("spacing", v["spacing"], fixed=True),
        ParamSpec("zpl_peak", v["zpl_peak"], fixed=True),
        ParamSpec("zpl_fwhm", fwhm0, 1e-6, 5e-3),
        ParamSpec("psb_a", v["psb_a"], fixed=True),
        ParamSpec("psb_gamma", v["psb_gamma"], fixed=True),
        ParamSpec("cav_peak", max(cav0, 1e-3 * scale), 0.0),
        ParamSpec("cav_fwhm", v["cav_fwhm"], fixed=True),
        ParamSpec("background", v["background"], fixed=True),
        ParamSpec("cav_center", E_c, fixed=True),
        ParamSpec("alpha1", clip(a10), *ALPHA_BOUNDS),
        ParamSpec("alpha2", clip(a20), *ALPHA_BOUNDS),
    ]
    return _solve(_model(kT), params, Em, ym, sig, max_iter, poisson_ml)


# ---------------------------------------------------------------------------
# orchestration

def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _capture(fn):
    def wrapped(x):
        try:
            return fn(x), None
        except Exception as exc:  # noqa: BLE001
            return None, exc
    return wrapped


def fit_scan(scan: DetuningScan, config: ScanConfig | None = None) -> ScanFitReport:
    """Run the full staged procedure on a detuning scan.

    Raises
    ------
    ScanPipelineError
        Tagged with the failing stage; ``partial`` holds the report so far.
    """
    config = config or ScanConfig()
    T = scan.temperature
    max_e = config.mask_max_energy or scan.fit_mask_max_energy
    window = tuple(config.window) if config.window else scan.consolidation_window
    n = len(scan)
    report = ScanFitReport(
        records=[SpectrumRecord(i, float(scan.scan_coord[i]), math.nan, math.nan, None)
                 for i in range(n)],
        shared=None, zpl_fwhm=None, dispersion=None, stage_a_indices=[],
        window_indices=[], config=config, temperature=T, mask_max_energy=max_e,
        window=window)

    try:
        disp = extract_cavity_dispersion(scan, config)
    except Exception as exc:
        raise ScanPipelineError("dispersion", str(exc), report) from exc
    report.dispersion = disp
    E_c = disp(np.arange(n))
    for r, e in zip(report.records, E_c):
        r.cavity_energy = float(e)
    if not (E_c.min() <= window[1] and E_c.max() >= window[0]):
        raise ScanPipelineError(
            "dispersion", f"consolidation window {window} outside scanned E_c range "
            f"[{E_c.min():.5f}, {E_c.max():.5f}]", report)

    ex_mean = 0.5 * sum(disp.emitter_estimate)
    fwhm_c = disp.fwhm_estimate if math.isfinite(disp.fwhm_estimate) else 2.3e-3
    red = [i for i in range(n) if E_c[i] - ex_mean < -config.red_detuned_factor * fwhm_c]
    report.stage_a_indices = red

    def run_a(i):
        return fit_stage_a(scan.spectra[i], float(E_c[i]), T, max_e, fwhm_c,
                           config.red_detuned_factor, max_iter=config.max_iter,
                           poisson_ml=config.poisson_ml)

    results = _pmap(_capture(run_a), red, config.threads)
    stage_a = []
    for i, (res, exc) in zip(red, results):
        if exc is not None:
            if isinstance(exc, (PreconditionError, FitError)):
                _logger.info("stage A skipped spectrum %d: %s", i, exc)
                continue
            raise ScanPipelineError("stage-a", f"spectrum {i}: {exc}", report) from exc
        report.records[i].stage_a = res
        stage_a.append((i, res))

    try:
        shared = consolidate_shared(stage_a, window)
    except Exception as exc:
        raise ScanPipelineError("consolidation", str(exc), report) from exc
    report.shared = shared
    report.window_indices = list(shared.used)

    def run_c(i):
        return fit_stage_c(scan.spectra[i], shared, float(E_c[i]), T, max_e,
                           max_iter=config.max_iter, poisson_ml=config.poisson_ml)

    results = _pmap(_capture(run_c), range(n), config.threads)
    fwhms = []
    for i, (res, exc) in enumerate(results):
        if exc is not None:
            raise ScanPipelineError("stage-c", f"spectrum {i}: {exc}", report) from exc
        rec = report.records[i]
        rec.fit = res
        p = params_from_values(res.estimates, T)
        rec.params = p
        rec.detuning = float(E_c[i] - res["center"])
        rec.alpha1, rec.alpha2 = res["alpha1"], res["alpha2"]
        try:
            rec.cavity_intensity = integrate_component(p, "cavity")
            rec.line1_intensity = integrate_component(p, "line1")
            rec.line2_intensity = integrate_component(p, "line2")
        except Exception as exc:
            raise ScanPipelineError("integration", f"spectrum {i}: {exc}", report) from exc
        s = res.sigmas["zpl_fwhm"]
        if s > 0 and math.isfinite(s):
            fwhms.append((i, WeightedSample(res["zpl_fwhm"], s)))
    if fwhms:
        stat = weighted_average([ws for _, ws in fwhms])
        # the shared values are fixed in every stage-C fit, so their errors are
        # common to all spectra and do not average down
        w = np.array([1.0 / ws.sigma ** 2 for _, ws in fwhms])
        sens = np.array([zpl_fwhm_sensitivity(scan.spectra[i], report.records[i].fit, T, max_e)
                         for i, _ in fwhms])
        g = (w[:, None] * sens).sum(axis=0) / w.sum()
        sys_var = float(g[:-1] @ shared.covariance @ g[:-1])
        if disp.covariance is not None:
            # preset E_c = polynomial(index): chain through the coefficients
            idx = np.array([i for i, _ in fwhms], dtype=np.float64)
            V = P.polyvander(idx, disp.degree)
            gc = (w * sens[:, -1]) @ V / w.sum()
            sys_var += float(gc @ disp.covariance @ gc)
        report.zpl_fwhm = WeightedSample(stat.value, math.sqrt(stat.sigma ** 2 + sys_var))
        report.zpl_fwhm_stat_sigma = stat.sigma
    return report
