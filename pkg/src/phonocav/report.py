"""Report documents and vector plots.

Reports are plain dictionaries serialized by :func:`phonocav.io.save_report`.
Every dimensional key carries its unit as a suffix (``_meV``, ``_ns``,
``_counts``, ``_counts_meV``); unit-free quantities (coupling factors, the
g2 depth, reduced chi-square) use bare names. ``report_schema.json`` pins
this down and :func:`validate_report` checks it.

Everything but ``generated_at`` is a pure function of the inputs, so reruns
give byte-identical documents once that field is fixed (set
``SOURCE_DATE_EPOCH`` to pin it).
"""

from datetime import datetime, timezone
import hashlib
import json
import os
from importlib import resources

import numpy as np

from . import __version__
from .lineshapes import components, eval_coupled
from .scan import ScanFitReport
from .timedomain import (G2FitResult, IrfModel, LifetimeResult, decay_convolved,
                         g2_convolved, g2_ideal)

MEV = 1e3  # eV -> meV
REPORT_FORMAT = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def timestamp() -> str:
    """UTC ISO-8601 time, or ``SOURCE_DATE_EPOCH`` when set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.replace(microsecond=0).isoformat()


def _vs(value, sigma, scale=1.0):
    return {"value": float(value) * scale, "sigma": float(sigma) * abs(scale)}


def _header(kind, inputs, config):
    return {
        "format": REPORT_FORMAT,
        "kind": kind,
        "tool": {"name": "phonocav", "version": __version__},
        "generated_at": timestamp(),
        "uncertainty": "1 sigma; covariance scaled by reduced chi-square",
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in inputs],
        "config": config,
    }


# ---------------------------------------------------------------------------
# scan

# fitted parameter -> (report key, scale)
_PARAM_UNITS = {
    "center": ("center_meV", MEV),
    "spacing": ("spacing_meV", MEV),
    "zpl_peak": ("zpl_peak_counts", 1.0),
    "zpl_fwhm": ("zpl_fwhm_meV", MEV),
    "psb_a": ("psb_a_counts_per_meV", 1.0 / MEV),
    "psb_gamma": ("psb_gamma_meV", MEV),
    "cav_center": ("cavity_center_meV", MEV),
    "cav_peak": ("cavity_peak_counts", 1.0),
    "cav_fwhm": ("cavity_fwhm_meV", MEV),
    "cavity_fwhm": ("cavity_fwhm_meV", MEV),
    "alpha1": ("alpha1", 1.0),
    "alpha2": ("alpha2", 1.0),
    "background": ("background_counts", 1.0),
}


def _param_block(values: dict, sigmas: dict | None = None) -> dict:
    out = {}
    for name, v in values.items():
        key, scale = _PARAM_UNITS.get(name, (None, None))
        if key is None:
            continue
        s = sigmas.get(name, 0.0) if sigmas is not None else None
        out[key] = _vs(v, s, scale) if s is not None else float(v) * scale
    return out


def scan_config_echo(report: ScanFitReport) -> dict:
    c = report.config
    return {
        "red_detuned_factor": c.red_detuned_factor,
        "dispersion_degree": c.dispersion_degree,
        "exclusion_half_width_meV": c.exclusion_half_width * MEV,
        "min_detect_fraction": c.min_detect_fraction,
        "detect_significance": c.detect_significance,
        "max_iter": c.max_iter,
        "poisson_ml": c.poisson_ml,
        "temperature_K": report.temperature,
        "mask_max_energy_meV": report.mask_max_energy * MEV,
        "consolidation_window_meV": [w * MEV for w in report.window],
    }


def scan_report(report: ScanFitReport, inputs=(), extra_config=None) -> dict:
    """Report document for a :class:`ScanFitReport`."""
    config = scan_config_echo(report)
    config.update(extra_config or {})
    doc = _header("scan-fit", inputs, config)
    sh = report.shared
    shared = None
    if sh is not None:
        shared = {
            "emitter_center_meV": _vs(sh.center.value, sh.center.sigma, MEV),
            "spacing_meV": _vs(sh.spacing.value, sh.spacing.sigma, MEV),
            "zpl_peak_counts": _vs(sh.zpl_peak.value, sh.zpl_peak.sigma),
            "psb_a_counts_per_meV": _vs(sh.psb_a.value, sh.psb_a.sigma, 1.0 / MEV),
            "psb_gamma_meV": _vs(sh.psb_gamma.value, sh.psb_gamma.sigma, MEV),
            "cavity_fwhm_meV": _vs(sh.cavity_fwhm.value, sh.cavity_fwhm.sigma, MEV),
            "background_counts": _vs(sh.background.value, sh.background.sigma),
            "zpl_fwhm_stage_a_meV": _vs(sh.zpl_fwhm_stage_a.value,
                                        sh.zpl_fwhm_stage_a.sigma, MEV),
            "consolidated_from": [int(i) for i in sh.used],
        }
    zpl = None
    if report.zpl_fwhm is not None:
        zpl = _vs(report.zpl_fwhm.value, report.zpl_fwhm.sigma, MEV)
        zpl["stat_sigma"] = report.zpl_fwhm_stat_sigma * MEV
    disp = None
    if report.dispersion is not None:
        d = report.dispersion
        disp = {
            "degree": d.degree,
            "coefficients_meV": [float(c) * MEV for c in d.coefficients],
            "rms_meV": d.rms * MEV,
            "detected": [int(i) for i in d.detected],
        }

    spectra = []
    for r in report.records:
        rec = {
            "index": r.index,
            "scan_coord": r.scan_coord,
            "cavity_energy_meV": r.cavity_energy * MEV,
            "detuning_meV": r.detuning * MEV,
            "stage_a": r.stage_a is not None,
            "converged": bool(r.fit is not None and r.fit.converged),
            "cavity_intensity_counts_meV": r.cavity_intensity * MEV,
            "line1_intensity_counts_meV": r.line1_intensity * MEV,
            "line2_intensity_counts_meV": r.line2_intensity * MEV,
        }
        if r.fit is not None:
            rec["redchi2"] = r.fit.redchi2
            rec["params"] = _param_block(r.fit.estimates, r.fit.sigmas)
        spectra.append(rec)

    curves = {}
    if report.records and all(r.fit is not None for r in report.records) and sh is not None:
        det = report.column("detuning")
        half = 0.5 * sh.spacing.value
        # each line's own detuning uses its fitted center in that spectrum
        ec = report.column("cavity_energy")
        centers = np.array([r.fit["center"] for r in report.records])
        curves = {
            "detuning_meV": det * MEV,
            "line1_detuning_meV": (ec - (centers - half)) * MEV,
            "line2_detuning_meV": (ec - (centers + half)) * MEV,
            "alpha1": report.column("alpha1"),
            "alpha2": report.column("alpha2"),
            "cavity_intensity_counts_meV": report.column("cavity_intensity") * MEV,
            "line1_intensity_counts_meV": report.column("line1_intensity") * MEV,
            "line2_intensity_counts_meV": report.column("line2_intensity") * MEV,
        }

    doc["scan"] = {
        "converged": report.converged,
        "n_spectra": len(report.records),
        "stage_a_indices": [int(i) for i in report.stage_a_indices],
        "window_indices": [int(i) for i in report.window_indices],
        "shared": shared,
        "zpl_fwhm_meV": zpl,
        "dispersion": disp,
        "spectra": spectra,
        "curves": curves,
    }
    return doc


# ---------------------------------------------------------------------------
# time domain

def _irf_block(irf: IrfModel) -> dict:
    out = {"location_ns": irf.location, "scale_ns": irf.scale, "shape": irf.shape}
    if irf.sigmas:
        out["sigmas"] = {("shape" if k == "shape" else
                          "amplitude_counts" if k == "amplitude" else f"{k}_ns"): v
                         for k, v in irf.sigmas.items()}
    return out


def g2_report(res: G2FitResult, irf: IrfModel, inputs=(), config=None) -> dict:
    doc = _header("g2-fit", inputs, dict(config or {}))
    doc["g2"] = {
        "g2_0": _vs(res.g2_0, res.g2_0_sigma),
        "p": _vs(res.p, res.sigmas["p"]),
        "tau1_ns": _vs(res.tau1, res.sigmas.get("tau1", 0.0)),
        "t0_ns": _vs(res.t0, res.sigmas.get("t0", 0.0)),
        "redchi2": res.fit.redchi2,
        "converged": res.fit.converged,
        "irf": _irf_block(irf),
    }
    return doc


def lifetime_report(res: LifetimeResult, irf: IrfModel, inputs=(), config=None) -> dict:
    doc = _header("lifetime-fit", inputs, dict(config or {}))
    s = res.fit.sigmas
    doc["lifetime"] = {
        "tau1_ns": _vs(res.tau1, res.sigma),
        "t0_ns": _vs(res.t0, s.get("t0", 0.0)),
        "amplitude_counts": _vs(res.amplitude, s.get("amplitude", 0.0)),
        "baseline_counts": _vs(res.baseline, s.get("baseline", 0.0)),
        "redchi2": res.fit.redchi2,
        "converged": res.fit.converged,
        "irf": _irf_block(irf),
    }
    return doc


# ---------------------------------------------------------------------------
# schema

def report_schema() -> dict:
    text = resources.files("phonocav").joinpath("report_schema.json").read_text("utf-8")
    return json.loads(text)


def validate_report(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` violates the schema."""
    import jsonschema

    jsonschema.validate(json.loads(json.dumps(doc, default=_to_list)), report_schema())


def _to_list(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# plots

def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "phonocav"
    matplotlib.rcParams["svg.fonttype"] = "path"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    import matplotlib.pyplot as plt

    plt.close(fig)


def plot_spectrum_overlay(spectrum, params, path, title=""):
    """Data, total model and the components "ZPL+PSB 1/2" and cavity."""
    plt = _pyplot()
    E = spectrum.energy
    Em = E * MEV
    comp = components(E, params)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(Em, spectrum.counts, ".", ms=2, color="0.4", label="data")
    ax.plot(Em, eval_coupled(E, params), "k-", lw=1, label="total model")
    ax.plot(Em, comp["line1"], lw=0.8, label="ZPL+PSB 1")
    ax.plot(Em, comp["line2"], lw=0.8, label="ZPL+PSB 2")
    ax.plot(Em, comp["cavity"], lw=0.8, label="cavity")
    ax.set_xlabel("energy (meV)")
    ax.set_ylabel("counts")
    ax.set_title(title)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_intensity_curves(doc, path):
    plt = _pyplot()
    c = doc["scan"]["curves"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(c["detuning_meV"], c["cavity_intensity_counts_meV"], "o-", ms=3, label="cavity")
    ax.plot(c["line1_detuning_meV"], c["line1_intensity_counts_meV"], "s-", ms=3,
            label="ZPL+PSB 1")
    ax.plot(c["line2_detuning_meV"], c["line2_intensity_counts_meV"], "^-", ms=3,
            label="ZPL+PSB 2")
    ax.axvline(0.0, color="0.7", lw=0.5)
    ax.set_xlabel("detuning E_c - E_x (meV)")
    ax.set_ylabel("integrated intensity (counts meV)")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_alpha_curves(doc, path):
    plt = _pyplot()
    c = doc["scan"]["curves"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(c["line1_detuning_meV"], c["alpha1"], "s-", ms=3, label="alpha 1")
    ax.plot(c["line2_detuning_meV"], c["alpha2"], "^-", ms=3, label="alpha 2")
    ax.axhline(0.0, color="0.7", lw=0.5)
    ax.set_xlabel("detuning E_c - E_x,i (meV)")
    ax.set_ylabel("coupling factor")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_g2(norm, res: G2FitResult, irf: IrfModel, path):
    """Normalized data, IRF-convolved fit and the deconvolved ideal curve."""
    plt = _pyplot()
    tau = norm.tau
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(tau, norm.values, ".", ms=2, color="0.4", label="data")
    ax.plot(tau, g2_convolved(tau, res.p, res.tau1, res.t0, irf, norm.bin_width), "k-",
            lw=1, label="convolved fit")
    fine = np.linspace(tau.min(), tau.max(), 4001)
    ax.plot(fine, g2_ideal(fine - res.t0, res.p, res.tau1), "--", lw=0.8,
            label="deconvolved")
    ax.set_xlabel("delay (ns)")
    ax.set_ylabel("g2")
    ax.set_title(f"g2(0) = {res.g2_0:.3f} +/- {res.g2_0_sigma:.3f}")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_lifetime(hist, res: LifetimeResult, irf: IrfModel, path):
    """Decay data, IRF-convolved fit and the deconvolved single exponential."""
    plt = _pyplot()
    t = hist.bin_centers
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(t, np.maximum(hist.counts, 0.5), ".", ms=2, color="0.4", label="data")
    fit = decay_convolved(t, res.amplitude, res.tau1, res.t0, res.baseline, irf,
                          hist.bin_width)
    ax.semilogy(t, fit, "k-", lw=1, label="convolved fit")
    ideal = np.where(t >= res.t0, res.amplitude
                     * np.exp(-np.clip(t - res.t0, 0, None) / res.tau1), 0.0)
    ax.semilogy(t, ideal + res.baseline, "--", lw=0.8, label="deconvolved")
    ax.set_xlabel("time (ns)")
    ax.set_ylabel("counts")
    ax.set_title(f"tau1 = {res.tau1:.3f} +/- {res.sigma:.3f} ns")
    ax.legend(fontsize=7)
    _save(fig, path)

