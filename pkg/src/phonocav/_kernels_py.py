"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` one to one and are used whenever the compiled
extension is unavailable (or ``PHONOCAV_PURE_PYTHON=1`` is set).
"""

import numpy as np

# Layout of the packed parameter vector accepted by ``coupled``.
THETA_FIELDS = (
    "ex1", "ex2",
    "zpl_peak1", "zpl_peak2",
    "zpl_fwhm1", "zpl_fwhm2",
    "psb_a1", "psb_a2",
    "psb_gamma1", "psb_gamma2",
    "kT",
    "cav_center", "cav_peak", "cav_fwhm",
    "alpha1", "alpha2",
    "background",
)
N_THETA = len(THETA_FIELDS)


def lorentzian(E, center, fwhm, peak):
    E = np.asarray(E, dtype=np.float64)
    hw2 = 0.25 * fwhm * fwhm
    d = E - center
    return peak * hw2 / (d * d + hw2)


def psb(E, center, a, gamma, kT):
    E = np.asarray(E, dtype=np.float64)
    d = E - center
    x = np.abs(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = x / kT
        inv = -1.0 / np.expm1(-y)          # 1 + n_B
        stokes = x * inv                    # |d| (1 + n_B)
        anti = x * np.exp(-y) * inv         # |d| n_B
    shape = np.where(d < 0.0, stokes, anti)
    shape = np.where(x == 0.0, kT, shape)
    return a * np.exp(-(d / gamma) ** 2) * shape


def coupled(E, theta):
    E = np.asarray(E, dtype=np.float64)
    t = np.asarray(theta, dtype=np.float64)
    filt = lorentzian(E, t[11], t[13], 1.0)
    line1 = lorentzian(E, t[0], t[4], t[2]) + psb(E, t[0], t[6], t[8], t[10])
    line2 = lorentzian(E, t[1], t[5], t[3]) + psb(E, t[1], t[7], t[9], t[10])
    return (line1 * (1.0 + t[14] * filt) + line2 * (1.0 + t[15] * filt)
            + t[12] * filt + t[16])


def convolve_valid(signal, kernel):
    """``np.convolve(signal, kernel, 'valid')``."""
    return np.convolve(np.asarray(signal, dtype=np.float64),
                       np.asarray(kernel, dtype=np.float64), mode="valid")
