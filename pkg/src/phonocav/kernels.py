"""Backend selection for the hot kernels.

The compiled extension ``phonocav._ckernels`` is used when it imports;
otherwise the numpy implementations in ``phonocav._kernels_py`` are used.
Setting ``PHONOCAV_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py
from ._kernels_py import N_THETA, THETA_FIELDS

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("PHONOCAV_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

lorentzian = _impl.lorentzian
psb = _impl.psb
coupled = _impl.coupled
convolve_valid = _impl.convolve_valid

__all__ = ["BACKEND", "THETA_FIELDS", "N_THETA", "lorentzian", "psb",
           "coupled", "convolve_valid"]
