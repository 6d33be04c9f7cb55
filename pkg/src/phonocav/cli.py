"""Command line interface: ``phonocav {fit-scan,fit-g2,fit-lifetime,synth}``.

Exit codes: 0 success, 1 input or pipeline error, 2 scan fit finished with
unconverged spectra, 64 usage error. Output files are rendered in memory
and written only once every computation has succeeded.
"""

import argparse
from dataclasses import asdict, fields
import io as _io
import logging
import os
from pathlib import Path
import sys

import yaml

from . import __version__
from . import io as pio
from . import report as rpt
from . import synthesis as syn
from .fitting import FitError
from .scan import ScanConfig, ScanPipelineError, fit_scan
from .timedomain import IrfModel, fit_g2, fit_irf, fit_lifetime, normalize_g2

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64

SCENARIOS = ("paper-scan", "paper-g2", "paper-lifetime")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Outputs:
    """Files to write once computation is done: relative path -> bytes."""

    def __init__(self, root):
        self.root = Path(root)
        self.files = {}

    def text(self, name, s):
        self.files[name] = s.encode("utf-8")

    def svg(self, name, plot, *args, **kwargs):
        buf = _io.BytesIO()
        plot(*args, path=buf, **kwargs)
        self.files[name] = buf.getvalue()

    def commit(self):
        for name, data in sorted(self.files.items()):
            path = self.root / name
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)


# ---------------------------------------------------------------------------
# fit-scan

def _scan_config(manifest, args) -> ScanConfig:
    kw = {k.removesuffix("_eV"): v for k, v in manifest.thresholds.items()}
    if args.threshold_red_detuned is not None:
        kw["red_detuned_factor"] = args.threshold_red_detuned
    if args.dispersion_degree is not None:
        kw["dispersion_degree"] = args.dispersion_degree
    kw["mask_max_energy"] = (args.mask_max_ev if args.mask_max_ev is not None
                             else manifest.mask_max_energy_eV)
    kw["window"] = tuple(args.window) if args.window else tuple(manifest.consolidation_window_eV)
    if args.threads is not None:
        kw["threads"] = args.threads
    try:
        return ScanConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_fit_scan(args) -> int:
    try:
        manifest = pio.load_manifest(args.manifest)
        scan = manifest.load_scan()
    except (pio.FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    config = _scan_config(manifest, args)
    seed = args.seed if args.seed is not None else manifest.seed
    try:
        result = fit_scan(scan, config)
    except ScanPipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    inputs = [Path(args.manifest)] + [manifest.resolve(p) for p in manifest.spectra]
    doc = rpt.scan_report(result, inputs, {"seed": seed})
    out = _Outputs(args.out)
    out.text("report.json", pio.dump_json(doc))
    if not args.no_plots:
        for rec, spectrum in zip(result.records, scan.spectra):
            out.svg(f"plots/spectrum_{rec.index:03d}.svg", rpt.plot_spectrum_overlay,
                    spectrum, rec.params,
                    title=f"spectrum {rec.index}, detuning {rec.detuning * 1e3:+.3f} meV")
        out.svg("plots/intensity_vs_detuning.svg", rpt.plot_intensity_curves, doc)
        out.svg("plots/alpha_vs_detuning.svg", rpt.plot_alpha_curves, doc)
    out.commit()

    z = doc["scan"]["zpl_fwhm_meV"]
    print(f"ZPL FWHM = {z['value']:.4f} +/- {z['sigma']:.4f} meV "
          f"(statistical {z['stat_sigma']:.4f} meV)")
    for key in ("spacing_meV", "psb_gamma_meV", "cavity_fwhm_meV"):
        v = doc["scan"]["shared"][key]
        print(f"{key.removesuffix('_meV')} = {v['value']:.4f} +/- {v['sigma']:.4f} meV")
    if not result.converged:
        bad = [r.index for r in result.records if r.fit is None or not r.fit.converged]
        print(f"warning: {len(bad)} spectra did not converge: {bad}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-g2 / fit-lifetime

def _load_irf(args):
    if args.irf is not None:
        irf_hist = pio.load_histogram(args.irf)
        return fit_irf(irf_hist), str(args.irf)
    xi, omega, alpha = args.irf_params
    return IrfModel(xi, omega, alpha), "params"


def _time_domain(args, kind) -> int:
    try:
        hist = pio.load_histogram(args.histogram)
        irf, irf_source = _load_irf(args)
    except (pio.FormatError, ValueError, FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    inputs = [Path(args.histogram)] + ([Path(args.irf)] if args.irf else [])
    config = {"irf_source": irf_source, "irf_centering": args.irf_centering}
    try:
        if kind == "g2":
            config.update(fit_window_ns=args.fit_window, tail_window_ns=list(args.tail_window),
                          fit_offset=not args.fixed_offset)
            norm = normalize_g2(hist, tuple(args.tail_window))
            res = fit_g2(norm, irf, fit_window=args.fit_window,
                         fit_offset=not args.fixed_offset, center=args.irf_centering)
            doc = rpt.g2_report(res, irf, inputs, config)
            line = f"g2(0) = {res.g2_0:.4f} +/- {res.g2_0_sigma:.4f}"
        else:
            res = fit_lifetime(hist, irf, center=args.irf_centering)
            doc = rpt.lifetime_report(res, irf, inputs, config)
            line = f"tau1 = {res.tau1:.4f} +/- {res.sigma:.4f} ns"
    except (FitError, ValueError) as exc:
        print(f"error: {kind} fit failed: {exc}", file=sys.stderr)
        return EXIT_ERROR

    if args.out is not None:
        out = _Outputs(args.out)
        out.text("report.json", pio.dump_json(doc))
        if not args.no_plots:
            if kind == "g2":
                out.svg("g2.svg", rpt.plot_g2, norm, res, irf)
            else:
                out.svg("lifetime.svg", rpt.plot_lifetime, hist, res, irf)
        out.commit()
    print(line)
    return EXIT_OK


def cmd_fit_g2(args) -> int:
    return _time_domain(args, "g2")


def cmd_fit_lifetime(args) -> int:
    return _time_domain(args, "lifetime")


# ---------------------------------------------------------------------------
# synth

def _irf_fields(irf: IrfModel) -> dict:
    return {"location": irf.location, "scale": irf.scale, "shape": irf.shape}


def _truth_from_doc(doc, source):
    """(kind, truth object) from a truth document; raises ValueError naming the field."""
    if not isinstance(doc, dict):
        raise ValueError(f"{source}: truth file must be a mapping")
    kind = doc.get("scenario")
    values = dict(doc.get("fields") or {})
    if kind not in ("scan", "g2", "lifetime"):
        raise ValueError(f"{source}: invalid truth field 'scenario': {kind!r} "
                         "(expected scan, g2 or lifetime)")
    cls = {"scan": syn.ScanTruthSpec, "g2": syn.StreamTruth, "lifetime": syn.DecayTruth}[kind]
    names = {f.name for f in fields(cls)}
    for k in values:
        if k not in names:
            raise ValueError(f"{source}: unknown truth field {k!r}")
    if "irf" in values:
        irf = values["irf"]
        try:
            values["irf"] = IrfModel(float(irf["location"]), float(irf["scale"]),
                                     float(irf.get("shape", 0.0)))
        except (TypeError, KeyError, ValueError) as exc:
            raise ValueError(f"{source}: invalid truth field 'irf': {exc}") from None
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    try:
        truth = cls(**values)
        if kind == "scan":
            truth.validate()
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{source}: {exc}") from None
    return kind, truth


def _scenario(name):
    if name == "paper-scan":
        return "scan", syn.ScanTruthSpec()
    if name == "paper-g2":
        return "g2", syn.StreamTruth()
    if name == "paper-lifetime":
        return "lifetime", syn.DecayTruth()
    raise KeyError(name)


def _sidecar(kind, truth, seed, scenario, extra):
    if kind == "scan":
        values = asdict(truth)
    else:
        values = {f.name: getattr(truth, f.name) for f in fields(truth)}
        values["irf"] = _irf_fields(truth.irf)
    return {"scenario": kind, "source": scenario, "seed": seed, "tool_version": __version__,
            "fields": values, "derived": extra}


def _synth_scan(spec, seed, out):
    truth = syn.reference_scan_truth(spec, seed)
    scan = syn.synth_scan(truth, syn.energy_grid())
    names = []
    for i, s in enumerate(scan.spectra):
        name = f"spectrum_{i:03d}.txt"
        out.text(name, pio.dump_spectrum(s, f"scan step {i}"))
        names.append(name)
    manifest = pio.ScanManifest(names, [float(x) for x in scan.scan_coord], spec.temperature,
                                truth.fit_mask_max_energy, truth.consolidation_window,
                                {}, seed)
    out.text("manifest.yaml", pio.dump_manifest(manifest))
    inten = syn.truth_intensities(truth)
    ex = truth.emitter_center
    return {
        "spacing_meV": spec.spacing * 1e3,
        "psb_gamma_meV": spec.psb_gamma * 1e3,
        "cavity_fwhm_meV": spec.cavity_fwhm * 1e3,
        "zpl_fwhm_meV": spec.zpl_fwhm * 1e3,
        "emitter_center_meV": ex * 1e3,
        "cavity_energy_meV": truth.cavity_energies * 1e3,
        "detuning_meV": (truth.cavity_energies - ex) * 1e3,
        "alpha1": [p.alpha[0] for p in truth.params],
        "alpha2": [p.alpha[1] for p in truth.params],
        "cavity_intensity_counts_meV": inten["cavity"] * 1e3,
        "line1_intensity_counts_meV": inten["line1"] * 1e3,
        "line2_intensity_counts_meV": inten["line2"] * 1e3,
    }


def _synth_irf(irf, seed, out):
    hist = syn.synth_irf_histogram(irf, seed=seed + 1)
    out.text("irf.txt", pio.dump_histogram(hist, "instrument response"))


def cmd_synth(args) -> int:
    source = args.scenario
    try:
        if source in SCENARIOS:
            kind, truth = _scenario(source)
        elif Path(source).is_file():
            try:
                doc = yaml.safe_load(Path(source).read_text(encoding="utf-8"))
            except yaml.YAMLError as exc:
                print(f"error: {source}: {exc}", file=sys.stderr)
                return EXIT_ERROR
            kind, truth = _truth_from_doc(doc, source)
        else:
            print(f"error: unknown scenario {source!r}; available: {', '.join(SCENARIOS)} "
                  "(or a truth file path)", file=sys.stderr)
            return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    out = _Outputs(args.out)
    seed = args.seed
    if kind == "scan":
        extra = _synth_scan(truth, seed, out)
    elif kind == "g2":
        hist = syn.synth_g2_histogram(truth, seed=seed)
        out.text("g2.txt", pio.dump_histogram(hist, "coincidence histogram"))
        _synth_irf(truth.irf, seed, out)
        extra = {"g2_0": 1.0 - truth.p, "tau1_ns": truth.tau1}
    else:
        hist = truth.histogram(seed)
        out.text("decay.txt", pio.dump_histogram(hist, "decay histogram"))
        _synth_irf(truth.irf, seed, out)
        extra = {"tau1_ns": truth.tau1}
    out.text("truth.json", pio.dump_json(_sidecar(kind, truth, seed, source, extra)))
    out.commit()
    print(f"wrote {len(out.files)} files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phonocav", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"phonocav {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fit-scan", help="fit a detuning scan listed in a manifest")
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--threshold-red-detuned", type=float,
                   help="stage-A subset: E_c - E_x < -factor * cavity FWHM")
    s.add_argument("--dispersion-degree", type=int, choices=(1, 2, 3))
    s.add_argument("--window", type=float, nargs=2, metavar=("LO_EV", "HI_EV"),
                   help="consolidation window on E_c (eV)")
    s.add_argument("--mask-max-ev", type=float, help="fit only energies below this (eV)")
    s.add_argument("--seed", type=int, help="recorded in the report (overrides manifest)")
    s.add_argument("--threads", type=int,
                   help="worker threads (default: $PHONOCAV_THREADS or 1)")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_fit_scan)

    for name, func, help_ in (("fit-g2", cmd_fit_g2, "fit an antibunching histogram"),
                              ("fit-lifetime", cmd_fit_lifetime, "fit a decay histogram")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("histogram", type=Path)
        g = t.add_mutually_exclusive_group(required=True)
        g.add_argument("--irf", type=Path, help="measured IRF histogram")
        g.add_argument("--irf-params", type=float, nargs=3,
                       metavar=("LOCATION_NS", "SCALE_NS", "SHAPE"))
        t.add_argument("--irf-centering", choices=("location", "mean", "none"),
                       default="location", help="IRF time origin (default: location)")
        t.add_argument("--out", type=Path, help="directory for report.json and the plot")
        t.add_argument("--no-plots", action="store_true")
        if name == "fit-g2":
            t.add_argument("--fit-window", type=float, default=30.0,
                           help="half width around the dip (ns)")
            t.add_argument("--tail-window", type=float, nargs=2, default=(50.0, 100.0),
                           metavar=("LO_NS", "HI_NS"), help="|tau| range for normalization")
            t.add_argument("--fixed-offset", action="store_true",
                           help="pin the dip at tau = 0 instead of fitting its offset")
        t.set_defaults(func=func)

    y = sub.add_parser("synth", help="generate synthetic data with a truth sidecar")
    y.add_argument("scenario", help=f"one of {', '.join(SCENARIOS)}, or a truth file")
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True, type=Path)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
