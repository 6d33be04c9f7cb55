"""Photon-correlation and lifetime analysis with instrument-response reconvolution.

Times are in ns. The instrument response is a skew-normal density; ideal
models are sampled on a grid ten times finer than the histogram bins,
convolved with the sampled response (truncated at 1e-6 of its peak and
renormalized to unit sum) and averaged back onto the bins.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import ndtr

from . import kernels
from .data import CorrelationHistogram
from .fitting import (DegenerateFitError, FitResult, ParamSpec, least_squares,
                      poisson_least_squares)

_logger = logging.getLogger(__name__)

OVERSAMPLE = 10
KERNEL_CUTOFF = 1e-6
TAIL_WINDOW = (50.0, 100.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_DIRECT_LIMIT = 200_000  # n_signal * n_kernel below which the direct kernel is used


@dataclass(frozen=True)
class IrfModel:
    """Skew-normal response: location ``xi``, scale ``omega`` (ns), shape ``alpha``."""

    location: float
    scale: float
    shape: float = 0.0
    sigmas: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"IRF scale must be > 0, got {self.scale!r}")

    @property
    def mean(self) -> float:
        delta = self.shape / math.sqrt(1.0 + self.shape ** 2)
        return self.location + self.scale * delta * math.sqrt(2.0 / math.pi)

    def shifted(self, dt) -> "IrfModel":
        return IrfModel(self.location + dt, self.scale, self.shape, dict(self.sigmas))


@dataclass
class NormalizedG2:
    tau: np.ndarray
    values: np.ndarray
    sigma: np.ndarray
    scale: float
    scale_sigma: float
    bin_width: float


@dataclass
class G2FitResult:
    p: float
    tau1: float
    t0: float
    sigmas: dict
    covariance: np.ndarray
    fit: FitResult

    @property
    def g2_0(self) -> float:
        return 1.0 - self.p

    @property
    def g2_0_sigma(self) -> float:
        return self.sigmas["p"]


@dataclass
class LifetimeResult:
    tau1: float
    sigma: float
    t0: float
    amplitude: float
    baseline: float
    fit: FitResult


def g2_ideal(tau, p, tau1):
    """``1 - p * exp(-|tau|/tau1)``."""
    tau = np.asarray(tau, dtype=np.float64)
    return 1.0 - p * np.exp(-np.abs(tau) / tau1)


def skew_gaussian_density(t, irf: IrfModel):
    """``(2/omega) phi(z) Phi(alpha z)`` with ``z = (t - xi)/omega``."""
    z = (np.asarray(t, dtype=np.float64) - irf.location) / irf.scale
    return 2.0 / irf.scale * np.exp(-0.5 * z * z) / _SQRT2PI * ndtr(irf.shape * z)


# ---------------------------------------------------------------------------
# convolution machinery

def _reference(irf: IrfModel, center: str) -> float:
    if center == "location":
        return irf.location
    if center == "mean":
        return irf.mean
    if center == "none":
        return 0.0
    raise ValueError(f"unknown IRF centering {center!r}")


def irf_kernel(irf: IrfModel, dt: float, center: str = "location"):
    """Sampled, truncated and unit-sum kernel.

    Returns ``(j0, weights)``: weight ``k`` sits at time offset
    ``(j0 + k) * dt`` relative to the reference point chosen by ``center``
    (``"location"``: xi, ``"mean"``: the IRF mean, ``"none"``: t = 0).
    """
    ref = _reference(irf, center)
    span = 12.0 * irf.scale
    lo = math.floor((irf.location - ref - span) / dt)
    hi = math.ceil((irf.location - ref + span) / dt)
    if lo > 0:
        lo = 0
    if hi < 0:
        hi = 0
    j = np.arange(lo, hi + 1)
    dens = skew_gaussian_density(ref + j * dt, irf)
    keep = np.flatnonzero(dens >= KERNEL_CUTOFF * dens.max())
    a, b = keep[0], keep[-1]
    w = dens[a:b + 1]
    return int(j[a]), w / w.sum()


def _convolve(signal, kernel):
    if signal.size * kernel.size <= _DIRECT_LIMIT:
        return kernels.convolve_valid(signal, kernel)
    return fftconvolve(signal, kernel, mode="valid")


def _fine_centers(grid, bin_width, oversample):
    h = bin_width / oversample
    offs = (np.arange(oversample) + 0.5) * h - 0.5 * bin_width
    return (np.asarray(grid, dtype=np.float64)[:, None] + offs[None, :]).ravel(), h


def _bin_width(grid, bin_width):
    if bin_width is not None:
        return float(bin_width)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 2:
        raise ValueError("bin_width is required for a single-bin grid")
    return float(grid[1] - grid[0])


def _convolved_binned(sampler, grid, bin_width, irf, oversample, center):
    """Bin averages of ``(model * irf)``; ``sampler(lo_edges, h)`` gives fine values."""
    fine, h = _fine_centers(grid, bin_width, oversample)
    j0, k = irf_kernel(irf, h, center)
    J = k.size
    # ext[m] samples the model at fine[0] - (j0 + J - 1) h + m h
    start = fine[0] - (j0 + J - 1) * h
    ext = start + np.arange(fine.size + J - 1) * h
    vals = _convolve(sampler(ext, h), k)
    return vals.reshape(-1, oversample).mean(axis=1)


def convolve_with_irf(model, irf: IrfModel, grid, bin_width=None,
                      oversample: int = OVERSAMPLE, center: str = "location",
                      support=None):
    """Bin-averaged convolution of a point-evaluable ``model(t)`` with the IRF.

    Parameters
    ----------
    model : callable
        Vectorized function of time.
    grid : array_like
        Uniform bin centers.
    support : (float, float), optional
        Interval outside which ``model`` is constant. When given, the grid
        must cover it padded by ``6 * irf.scale`` on both sides.

    Raises
    ------
    ValueError
        If ``support`` is given and the grid is too short.
    """
    grid = np.asarray(grid, dtype=np.float64)
    bw = _bin_width(grid, bin_width)
    if support is not None:
        need_lo = support[0] - 6.0 * irf.scale
        need_hi = support[1] + 6.0 * irf.scale
        if grid[0] - 0.5 * bw > need_lo or grid[-1] + 0.5 * bw < need_hi:
            raise ValueError(
                f"grid [{grid[0] - 0.5 * bw:.4g}, {grid[-1] + 0.5 * bw:.4g}] ns does not span "
                f"the required [{need_lo:.4g}, {need_hi:.4g}] ns")
    return _convolved_binned(lambda t, h: model(t), grid, bw, irf, oversample, center)


def g2_convolved(tau, p, tau1, t0, irf, bin_width=None, oversample=OVERSAMPLE,
                 center="location"):
    """Bin-averaged ideal g2 (dip at ``t0``) convolved with the IRF."""
    tau = np.asarray(tau, dtype=np.float64)
    bw = _bin_width(tau, bin_width)
    return _convolved_binned(lambda t, h: g2_ideal(t - t0, p, tau1), tau, bw, irf,
                             oversample, center)


def _decay_cells(t, h, t0, tau1):
    """Exact average of ``H(t-t0) exp(-(t-t0)/tau1)`` over cells ``[t-h/2, t+h/2]``."""
    a = t - 0.5 * h
    b = t + 0.5 * h
    lo = np.maximum(a, t0)
    out = np.zeros_like(t)
    on = b > t0
    width = b[on] - lo[on]
    out[on] = (np.exp(-(lo[on] - t0) / tau1) * -np.expm1(-width / tau1)) * (tau1 / h)
    return out


def decay_convolved(t, amplitude, tau1, t0, baseline, irf, bin_width=None,
                    oversample=OVERSAMPLE, center="location"):
    """Bin-averaged ``A H(t-t0) exp(-(t-t0)/tau1) + baseline`` convolved with the IRF."""
    t = np.asarray(t, dtype=np.float64)
    bw = _bin_width(t, bin_width)
    pulse = _convolved_binned(lambda x, h: _decay_cells(x, h, t0, tau1), t, bw, irf,
                              oversample, center)
    return amplitude * pulse + baseline


def irf_binned(t, irf, bin_width=None, oversample=OVERSAMPLE):
    """Bin averages of the IRF density."""
    t = np.asarray(t, dtype=np.float64)
    bw = _bin_width(t, bin_width)
    fine, _ = _fine_centers(t, bw, oversample)
    return skew_gaussian_density(fine, irf).reshape(-1, oversample).mean(axis=1)


# ---------------------------------------------------------------------------
# IRF fit

def _smooth(y, n=5):
    k = np.ones(n) / n
    return np.convolve(y, k, mode="same")


def _check_single_pulse(t, y):
    med = float(np.median(y))
    s = _smooth(y.astype(np.float64))
    peak = float(s.max())
    if peak - med < 5.0 * math.sqrt(med + 1.0) or peak < 10.0:
        raise ValueError("no dominant pulse in histogram (flat or empty)")
    thr = med + 0.2 * (peak - med)
    above = s > thr
    # count separated regions above threshold
    edges = np.diff(above.astype(int))
    n_regions = int((edges == 1).sum() + (1 if above[0] else 0))
    if n_regions > 1:
        starts = t[np.flatnonzero(edges == 1) + 1]
        raise ValueError(
            f"histogram has {n_regions} separate pulses (near {np.round(starts, 2).tolist()} ns); "
            "select a time window around a single pulse")


def fit_irf(hist: CorrelationHistogram, max_iter: int = 200) -> IrfModel:
    """Fit ``amplitude * skew-normal density`` (bin-averaged) to a laser histogram.

    Raises
    ------
    ValueError
        For a flat histogram or one with several separated pulses.
    """
    t = hist.bin_centers
    y = np.asarray(hist.counts, dtype=np.float64)
    _check_single_pulse(t, y)
    bw = hist.bin_width
    total = float(y.sum())
    mu = float(np.dot(t, y) / total)
    var = float(np.dot((t - mu) ** 2, y) / total)
    skew = float(np.dot((t - mu) ** 3, y) / total) / var ** 1.5
    # method-of-moments start for the shape parameter
    g = min(abs(skew), 0.95)
    r = (2.0 * g / (4.0 - math.pi)) ** (1.0 / 3.0)
    delta = math.copysign(min(r / math.sqrt(2.0 / math.pi * (1.0 + r * r)), 0.95), skew)
    alpha0 = delta / math.sqrt(1.0 - delta * delta)
    if abs(alpha0) < 0.3:
        alpha0 = math.copysign(0.3, skew if skew != 0 else 1.0)
    omega0 = math.sqrt(var / (1.0 - 2.0 * delta * delta / math.pi))
    xi0 = mu - omega0 * delta * math.sqrt(2.0 / math.pi)

    params = [
        ParamSpec("amplitude", total, 0.0),
        ParamSpec("location", xi0),
        ParamSpec("scale", omega0, 1e-4, 100.0),
        ParamSpec("shape", alpha0, -50.0, 50.0),
    ]

    def f(x, v):
        return v["amplitude"] * bw * irf_binned(
            x, IrfModel(v["location"], v["scale"], v["shape"]), bw)

    res = least_squares(f, params, t, y, max_iter=max_iter)
    return IrfModel(res["location"], res["scale"], res["shape"],
                    sigmas={k: res.sigmas[k] for k in ("location", "scale", "shape",
                                                       "amplitude")})


# ---------------------------------------------------------------------------
# g2

def normalize_g2(hist: CorrelationHistogram, tail_window=TAIL_WINDOW, tau1_prior=None,
                 center: float = 0.0) -> NormalizedG2:
    """Divide a coincidence histogram by its mean over ``|tau - center|`` in ``tail_window``.

    Raises
    ------
    ValueError
        If the window holds fewer than 20 bins, or starts below
        ``10 * tau1_prior``.
    """
    lo, hi = tail_window
    if tau1_prior is not None and lo < 10.0 * tau1_prior:
        raise ValueError(
            f"tail window starts at {lo} ns, inside 10 x tau1 = {10 * tau1_prior} ns of the dip")
    tau = hist.bin_centers
    y = np.asarray(hist.counts, dtype=np.float64)
    a = np.abs(tau - center)
    sel = (a >= lo) & (a <= hi)
    if sel.sum() < 20:
        raise ValueError(f"tail window {tail_window} ns holds {int(sel.sum())} bins (need >= 20)")
    scale = float(y[sel].mean())
    if not scale > 0:
        raise ValueError("tail window holds no counts")
    scale_sigma = float(y[sel].std(ddof=1) / math.sqrt(sel.sum()))
    return NormalizedG2(tau.copy(), y / scale, np.sqrt(np.maximum(y, 1.0)) / scale,
                        scale, scale_sigma, hist.bin_width)


def _g2_seeds(tau, v):
    s = _smooth(v, 5)
    i = int(np.argmin(s))
    t0 = float(tau[i])
    p = float(np.clip(1.0 - s[i], 0.05, 0.95))
    half = 1.0 - 0.5 * p
    right = np.flatnonzero((tau > t0) & (s >= half))
    width = float(tau[right[0]] - t0) if right.size else 2.0
    return p, max(width / math.log(2.0), 0.2), t0


def fit_g2(hist, irf: IrfModel, fit_window: float = 30.0, tail_window=TAIL_WINDOW,
           fit_offset: bool = True, center: str = "location",
           max_iter: int = 200) -> G2FitResult:
    """Fit the IRF-convolved antibunching dip to a (normalized) histogram.

    ``hist`` may be a :class:`NormalizedG2` or a raw
    :class:`CorrelationHistogram`, which is normalized by its tail first.
    Only bins within ``fit_window`` ns of the dip are fitted.
    """
    norm = hist if isinstance(hist, NormalizedG2) else normalize_g2(hist, tail_window)
    p0, tau10, t00 = _g2_seeds(norm.tau, norm.values)
    if not fit_offset:
        t00 = 0.0
    sel = np.abs(norm.tau - t00) <= fit_window
    tau, v, s = norm.tau[sel], norm.values[sel], norm.sigma[sel]
    bw = norm.bin_width

    def f(x, q):
        return g2_convolved(x, q["p"], q["tau1"], q["t0"], irf, bw, center=center)

    params = [
        ParamSpec("p", p0, 0.0, 1.0),
        ParamSpec("tau1", tau10, 1e-3, 100.0),
        ParamSpec("t0", t00, fixed=not fit_offset),
    ]
    try:
        res = poisson_least_squares(f, params, tau, v, counts_per_unit=norm.scale,
                                    max_iter=max_iter)
    except DegenerateFitError:
        # no dip: only the depth is identifiable
        _logger.info("g2 fit degenerate; refitting depth only")
        params = [ParamSpec("p", 0.01, 0.0, 1.0), ParamSpec("tau1", tau10, fixed=True),
                  ParamSpec("t0", t00, fixed=True)]
        res = least_squares(f, params, tau, v, sigma=s, max_iter=max_iter)
    return G2FitResult(res["p"], res["tau1"], res["t0"], dict(res.sigmas),
                       res.covariance, res)


# ---------------------------------------------------------------------------
# lifetime

def fit_lifetime(hist: CorrelationHistogram, irf: IrfModel, center: str = "location",
                 max_iter: int = 200) -> LifetimeResult:
    """Fit ``A H(t-t0) exp(-(t-t0)/tau1) + baseline`` convolved with the IRF.

    Raises
    ------
    ValueError
        If the histogram covers less than five decay times after the pulse.
    """
    t = hist.bin_centers
    y = np.asarray(hist.counts, dtype=np.float64)
    bw = hist.bin_width
    s = _smooth(y, 3)
    ipk = int(np.argmax(s))
    base0 = float(np.median(y[: max(ipk - int(3.0 / bw), 1)])) if ipk > 5 else float(y.min())
    peak = float(s[ipk]) - base0
    # decay time from the 1/e point after the maximum
    after = np.flatnonzero((t > t[ipk]) & (s - base0 <= peak / math.e))
    tau0 = float(t[after[0]] - t[ipk]) if after.size else 1.0
    tau0 = max(tau0, 2.0 * bw)
    if t[-1] - t[ipk] < 5.0 * tau0:
        raise ValueError(
            f"histogram covers {t[-1] - t[ipk]:.3g} ns after the pulse; "
            f"need >= 5 tau1 ~ {5 * tau0:.3g} ns")
    rise = np.flatnonzero(s[: ipk + 1] - base0 >= 0.5 * peak)
    t00 = float(t[rise[0]]) if rise.size else float(t[ipk])
    t00 -= 0.5 * irf.scale if center == "location" else 0.0
    # amplitude from the peak, corrected for IRF smoothing below
    unit = decay_convolved(t, 1.0, tau0, t00, 0.0, irf, bw, center=center)
    amp0 = max(peak / max(unit.max(), 1e-12), 1.0)

    params = [
        ParamSpec("amplitude", amp0, 0.0),
        ParamSpec("tau1", tau0, 1e-4, 1e3),
        ParamSpec("t0", t00),
        ParamSpec("baseline", max(base0, 1e-3), 0.0),
    ]

    def f(x, q):
        return decay_convolved(x, q["amplitude"], q["tau1"], q["t0"], q["baseline"],
                               irf, bw, center=center)

    res = poisson_least_squares(f, params, t, y, max_iter=max_iter)
    return LifetimeResult(res["tau1"], res.sigmas["tau1"], res["t0"], res["amplitude"],
                          res["baseline"], res)
