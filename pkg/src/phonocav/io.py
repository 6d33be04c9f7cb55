"""Text file formats: spectra, correlation histograms, scan manifests, reports.

Spectrum and histogram files are whitespace-separated tables with ``#``
comment lines and a single header line naming the columns. Numbers are
written with 17 significant digits, so a load/save round trip is exact.
Manifests are YAML; reports are JSON.
"""

from dataclasses import dataclass, field
import json
import math
import os
from pathlib import Path

import numpy as np
import yaml

from .data import (CONSOLIDATION_WINDOW, MASK_MAX_ENERGY, SCAN_TEMPERATURE,
                   CorrelationHistogram, DetuningScan, Spectrum)

SPECTRUM_COLUMNS = ("energy_eV", "counts")
HISTOGRAM_COLUMNS = ("tau_ns", "counts")
_BIN_WIDTH_KEY = "bin_width_ns"


class FormatError(ValueError):
    """Malformed input file; the message carries the path and line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line else self.path
        super().__init__(f"{where}: {message}")


def _fmt(x) -> str:
    return "%.17g" % x


def _atomic_write(path, text):
    """Write via a temporary file and rename, so failures leave no partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _read_table(path, expected, optional=()):
    """Parse a commented table; returns (header, rows, header_comments)."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(path, 0, f"cannot read file ({exc.strerror})") from exc
    header, rows, comments = None, [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if header is None:
                comments.append((lineno, line[1:].strip()))
            continue
        tokens = line.split()
        if header is None:
            allowed = [tuple(expected) + tuple(optional[:k]) for k in range(len(optional) + 1)]
            if tuple(tokens) not in allowed:
                raise FormatError(path, lineno,
                                  f"header must be {' '.join(expected)!r} "
                                  f"(optionally followed by {' '.join(optional)!r}), "
                                  f"got {line!r}")
            header = tokens
            continue
        if len(tokens) != len(header):
            raise FormatError(path, lineno,
                              f"expected {len(header)} columns, got {len(tokens)}")
        try:
            rows.append((lineno, [float(t) for t in tokens]))
        except ValueError as exc:
            raise FormatError(path, lineno, f"not a number: {exc}") from None
    if header is None:
        raise FormatError(path, 0, "no header line found")
    if not rows:
        raise FormatError(path, 0, "no data rows")
    return header, rows, comments


# ---------------------------------------------------------------------------
# spectra

def dump_spectrum(spectrum: Spectrum, comment: str | None = None) -> str:
    cols = list(SPECTRUM_COLUMNS) + (["sigma"] if spectrum.sigma is not None else [])
    out = ["# phonocav spectrum"]
    if comment:
        out += [f"# {c}" for c in comment.splitlines()]
    out.append(" ".join(cols))
    arrays = [spectrum.energy, spectrum.counts] + (
        [spectrum.sigma] if spectrum.sigma is not None else [])
    for row in zip(*arrays):
        out.append(" ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def save_spectrum(spectrum: Spectrum, path, comment: str | None = None) -> None:
    _atomic_write(path, dump_spectrum(spectrum, comment))


def load_spectrum(path) -> Spectrum:
    header, rows, _ = _read_table(path, SPECTRUM_COLUMNS, ("sigma",))
    data = np.array([r for _, r in rows], dtype=np.float64)
    E = data[:, 0]
    bad = np.flatnonzero(np.diff(E) <= 0)
    if bad.size:
        raise FormatError(path, rows[bad[0] + 1][0], "energy_eV must be strictly increasing")
    neg = np.flatnonzero((data[:, 1] < 0) | ~np.isfinite(data[:, 1]))
    if neg.size:
        raise FormatError(path, rows[neg[0]][0], "counts must be finite and non-negative")
    sigma = None
    if len(header) == 3:
        sigma = data[:, 2]
        nonpos = np.flatnonzero(~(sigma > 0))
        if nonpos.size:
            raise FormatError(path, rows[nonpos[0]][0], "sigma must be positive")
    return Spectrum(E, data[:, 1], sigma)


# ---------------------------------------------------------------------------
# histograms

def dump_histogram(hist: CorrelationHistogram, comment: str | None = None) -> str:
    counts = np.asarray(hist.counts)
    if not np.all(counts == np.round(counts)):
        raise ValueError("histogram counts must be integers")
    out = ["# phonocav histogram", f"# {_BIN_WIDTH_KEY} = {_fmt(hist.bin_width)}"]
    if comment:
        out += [f"# {c}" for c in comment.splitlines()]
    out.append(" ".join(HISTOGRAM_COLUMNS))
    for t, c in zip(hist.bin_centers, counts):
        out.append(f"{_fmt(t)} {int(c)}")
    return "\n".join(out) + "\n"


def save_histogram(hist: CorrelationHistogram, path, comment: str | None = None) -> None:
    _atomic_write(path, dump_histogram(hist, comment))


def load_histogram(path) -> CorrelationHistogram:
    _, rows, comments = _read_table(path, HISTOGRAM_COLUMNS)
    data = np.array([r for _, r in rows], dtype=np.float64)
    tau, counts = data[:, 0], data[:, 1]
    frac = np.flatnonzero((counts != np.round(counts)) | (counts < 0))
    if frac.size:
        raise FormatError(path, rows[frac[0]][0], "counts must be non-negative integers")
    bw = None
    for lineno, text in comments:
        key, sep, val = text.partition("=")
        if sep and key.strip() == _BIN_WIDTH_KEY:
            try:
                bw = float(val)
            except ValueError:
                raise FormatError(path, lineno, f"bad {_BIN_WIDTH_KEY}: {val.strip()!r}") from None
    if bw is None:
        if tau.size < 2:
            raise FormatError(path, 0, f"single-bin histogram needs a '# {_BIN_WIDTH_KEY} =' line")
        bw = float(tau[1] - tau[0])
    if not bw > 0:
        raise FormatError(path, 0, "bin width must be > 0")
    if tau.size > 1:
        dev = np.abs(np.diff(tau) - bw)
        bad = np.flatnonzero(dev > 1e-9)
        if bad.size:
            raise FormatError(path, rows[bad[0] + 1][0],
                              f"tau_ns not uniformly spaced by {bw:g} ns (within 1e-9 ns)")
    return CorrelationHistogram(tau, counts.astype(np.int64), bw)


# ---------------------------------------------------------------------------
# manifests

# manifest "thresholds" keys; ScanConfig field = key without the unit suffix
THRESHOLD_KEYS = {
    "red_detuned_factor": float,
    "dispersion_degree": int,
    "exclusion_half_width_eV": float,
    "min_detect_fraction": float,
    "detect_significance": float,
    "max_iter": int,
}


@dataclass
class ScanManifest:
    """Spectrum files of one detuning scan plus analysis settings.

    Paths are stored as written and resolved against ``base_dir``.
    """

    spectra: list
    scan_coord: list | None = None
    temperature_K: float = SCAN_TEMPERATURE
    mask_max_energy_eV: float = MASK_MAX_ENERGY
    consolidation_window_eV: tuple = CONSOLIDATION_WINDOW
    thresholds: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def load_scan(self) -> DetuningScan:
        spectra = [load_spectrum(self.resolve(p)) for p in self.spectra]
        return DetuningScan(spectra, self.scan_coord, self.temperature_K,
                            self.mask_max_energy_eV, tuple(self.consolidation_window_eV))


def _node_line(node, key=None):
    """1-based line of a mapping entry (or of the node itself)."""
    if key is not None and isinstance(node, yaml.MappingNode):
        for k, _ in node.value:
            if k.value == key:
                return k.start_mark.line + 1
    return node.start_mark.line + 1 if node is not None else 0


def load_manifest(path) -> ScanManifest:
    """Parse and validate a YAML scan manifest.

    Raises
    ------
    FormatError
        With the offending line for syntax errors, unknown or ill-typed keys,
        invalid values and missing spectrum files.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(path, 0, f"cannot read manifest ({exc.strerror})") from exc
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise FormatError(path, mark.line + 1 if mark else 0,
                          f"YAML syntax error: {exc.problem}") from None
    if doc is None:
        raise FormatError(path, 1, "manifest is empty")
    if not isinstance(doc, dict):
        raise FormatError(path, _node_line(root), "manifest must be a mapping")

    known = {"spectra", "scan_coord", "temperature_K", "mask_max_energy_eV",
             "consolidation_window_eV", "thresholds", "seed"}
    for k in doc:
        if k not in known:
            raise FormatError(path, _node_line(root, k),
                              f"unknown key {k!r}; expected one of {sorted(known)}")

    def fail(key, msg):
        raise FormatError(path, _node_line(root, key), f"{key}: {msg}")

    spectra = doc.get("spectra")
    if not isinstance(spectra, list) or not spectra:
        fail("spectra", "must be a non-empty list of file paths")
    for s in spectra:
        if not isinstance(s, str):
            fail("spectra", f"entries must be path strings, got {s!r}")

    def number(key, default, kind=float):
        v = doc.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            fail(key, f"must be a number, got {v!r}")
        return kind(v)

    temperature = number("temperature_K", SCAN_TEMPERATURE)
    if not temperature > 0:
        fail("temperature_K", f"must be > 0, got {temperature}")
    mask = number("mask_max_energy_eV", MASK_MAX_ENERGY)
    seed = number("seed", 0, int)

    window = doc.get("consolidation_window_eV", list(CONSOLIDATION_WINDOW))
    if (not isinstance(window, list) or len(window) != 2
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in window)):
        fail("consolidation_window_eV", f"must be a list [lo, hi], got {window!r}")
    if not window[0] < window[1]:
        fail("consolidation_window_eV", "needs lo < hi")

    coord = doc.get("scan_coord")
    if coord is not None:
        if (not isinstance(coord, list) or len(coord) != len(spectra)
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in coord)):
            fail("scan_coord", f"must list one number per spectrum ({len(spectra)})")
        coord = [float(x) for x in coord]

    thresholds = doc.get("thresholds") or {}
    if not isinstance(thresholds, dict):
        fail("thresholds", "must be a mapping")
    th_node = None
    if isinstance(root, yaml.MappingNode):
        th_node = next((v for k, v in root.value if k.value == "thresholds"), None)
    clean = {}
    for k, v in thresholds.items():
        kind = THRESHOLD_KEYS.get(k)
        line = _node_line(th_node, k) if th_node is not None else 0
        if kind is None:
            raise FormatError(path, line, f"thresholds: unknown key {k!r}; "
                                          f"expected one of {sorted(THRESHOLD_KEYS)}")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (
                kind is int and v != int(v)):
            raise FormatError(path, line, f"thresholds.{k}: must be {kind.__name__}, got {v!r}")
        clean[k] = kind(v)

    m = ScanManifest([str(s) for s in spectra], coord, temperature, mask,
                     (float(window[0]), float(window[1])), clean, seed, path.parent)
    sp_node = next((v for k, v in root.value if k.value == "spectra"), None)
    for i, s in enumerate(m.spectra):
        if not m.resolve(s).is_file():
            line = sp_node.value[i].start_mark.line + 1 if sp_node is not None else 0
            raise FormatError(path, line, f"spectrum file not found: {s}")
    return m


def dump_manifest(m: ScanManifest) -> str:
    doc = {
        "spectra": list(m.spectra),
        "temperature_K": float(m.temperature_K),
        "mask_max_energy_eV": float(m.mask_max_energy_eV),
        "consolidation_window_eV": [float(x) for x in m.consolidation_window_eV],
        "seed": int(m.seed),
    }
    if m.scan_coord is not None:
        doc["scan_coord"] = [float(x) for x in m.scan_coord]
    if m.thresholds:
        doc["thresholds"] = dict(m.thresholds)
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=None, width=100)


def save_manifest(m: ScanManifest, path) -> None:
    _atomic_write(path, dump_manifest(m))


# ---------------------------------------------------------------------------
# JSON documents (reports, truth sidecars)

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dump_json(doc) -> str:
    """Canonical JSON: sorted keys, two-space indent, non-finite floats as null."""
    return json.dumps(_jsonable(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def save_report(doc: dict, path) -> None:
    _atomic_write(path, dump_json(doc))


def load_report(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None


__all__ = [
    "FormatError", "ScanManifest", "load_spectrum", "save_spectrum", "dump_spectrum",
    "load_histogram", "save_histogram", "dump_histogram", "load_manifest", "save_manifest", "dump_manifest", "load_report",
    "save_report", "dump_json",
]
