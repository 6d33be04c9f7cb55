"""Phonon-sideband cavity spectroscopy and photon-correlation fitting."""
__version__ = "0.1.0"
