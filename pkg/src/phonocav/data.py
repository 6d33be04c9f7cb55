"""Containers for measured or synthetic data."""

from dataclasses import dataclass, field

import numpy as np

# defaults for the scan pipeline, energies in eV
MASK_MAX_ENERGY = 1.951
CONSOLIDATION_WINDOW = (1.9413, 1.9426)
SCAN_TEMPERATURE = 4.0
HISTOGRAM_BIN_WIDTH = 0.1  # ns


@dataclass
class Spectrum:
    """Photon counts on a strictly increasing energy grid (eV)."""

    energy: np.ndarray
    counts: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        self.energy = np.asarray(self.energy, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.energy.ndim != 1 or self.energy.shape != self.counts.shape:
            raise ValueError("energy and counts must be 1-D arrays of equal length")
        if self.energy.size > 1 and not np.all(np.diff(self.energy) > 0):
            raise ValueError("energy must be strictly increasing")
        if np.any(self.counts < 0) or not np.all(np.isfinite(self.counts)):
            raise ValueError("counts must be finite and non-negative")
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=np.float64)
            if self.sigma.shape != self.counts.shape or np.any(self.sigma <= 0):
                raise ValueError("sigma must match counts and be positive")

    def __len__(self):
        return self.energy.size

    def __eq__(self, other):
        if not isinstance(other, Spectrum):
            return NotImplemented
        same_sigma = (self.sigma is None and other.sigma is None) or (
            self.sigma is not None and other.sigma is not None
            and np.array_equal(self.sigma, other.sigma))
        return (np.array_equal(self.energy, other.energy)
                and np.array_equal(self.counts, other.counts) and same_sigma)


@dataclass
class DetuningScan:
    """Spectra ordered by cavity-length step."""

    spectra: list
    scan_coord: np.ndarray | None = None
    temperature: float = SCAN_TEMPERATURE
    fit_mask_max_energy: float = MASK_MAX_ENERGY
    consolidation_window: tuple = CONSOLIDATION_WINDOW

    def __post_init__(self):
        if len(self.spectra) < 3:
            raise ValueError(f"a detuning scan needs >= 3 spectra, got {len(self.spectra)}")
        grid = self.spectra[0].energy
        for i, s in enumerate(self.spectra[1:], start=1):
            if not np.array_equal(s.energy, grid):
                raise ValueError(f"spectrum {i} does not share the energy grid of spectrum 0")
        if self.scan_coord is None:
            self.scan_coord = np.arange(len(self.spectra), dtype=np.float64)
        self.scan_coord = np.asarray(self.scan_coord, dtype=np.float64)
        if self.scan_coord.shape != (len(self.spectra),):
            raise ValueError("scan_coord must have one entry per spectrum")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        lo, hi = self.consolidation_window
        if not lo < hi:
            raise ValueError("consolidation window must satisfy lo < hi")
        self.consolidation_window = (float(lo), float(hi))

    @property
    def energy(self) -> np.ndarray:
        return self.spectra[0].energy

    @property
    def counts(self) -> np.ndarray:
        """(n_spectra, n_energy) array."""
        return np.vstack([s.counts for s in self.spectra])

    def __len__(self):
        return len(self.spectra)


@dataclass
class CorrelationHistogram:
    """Coincidence or decay counts on a uniform time grid (ns)."""

    bin_centers: np.ndarray
    counts: np.ndarray
    bin_width: float = HISTOGRAM_BIN_WIDTH
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bin_centers = np.asarray(self.bin_centers, dtype=np.float64)
        self.counts = np.asarray(self.counts)
        if self.bin_centers.shape != self.counts.shape or self.bin_centers.ndim != 1:
            raise ValueError("bin_centers and counts must be 1-D arrays of equal length")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be > 0")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if self.bin_centers.size > 1:
            d = np.diff(self.bin_centers)
            if np.max(np.abs(d - self.bin_width)) > 1e-9:
                raise ValueError("bin_centers must be uniformly spaced by bin_width")

    def __len__(self):
        return self.counts.size

    def __eq__(self, other):
        if not isinstance(other, CorrelationHistogram):
            return NotImplemented
        return (np.array_equal(self.bin_centers, other.bin_centers)
                and np.array_equal(self.counts, other.counts)
                and self.bin_width == other.bin_width)
