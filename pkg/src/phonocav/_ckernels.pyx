# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: lineshape evaluation and direct convolution.

Signatures and results match ``_kernels_py`` to within rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, fabs

cnp.import_array()


cdef inline double _lor(double e, double c, double hw2, double peak) noexcept nogil:
    cdef double d = e - c
    return peak * hw2 / (d * d + hw2)


cdef inline double _psb(double e, double c, double a, double g, double kT) noexcept nogil:
    cdef double d = e - c
    cdef double x = fabs(d)
    cdef double y, inv, shape, u
    if x == 0.0:
        shape = kT
    else:
        y = x / kT
        inv = -1.0 / expm1(-y)
        if d < 0.0:
            shape = x * inv
        else:
            shape = x * exp(-y) * inv
    u = d / g
    return a * exp(-u * u) * shape


def lorentzian(E, double center, double fwhm, double peak):
    cdef double[::1] e = np.ascontiguousarray(E, dtype=np.float64).ravel()
    cdef Py_ssize_t n = e.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double hw2 = 0.25 * fwhm * fwhm
    with nogil:
        for i in range(n):
            o[i] = _lor(e[i], center, hw2, peak)
    return out.reshape(np.shape(E))


def psb(E, double center, double a, double gamma, double kT):
    cdef double[::1] e = np.ascontiguousarray(E, dtype=np.float64).ravel()
    cdef Py_ssize_t n = e.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _psb(e[i], center, a, gamma, kT)
    return out.reshape(np.shape(E))


def coupled(E, theta):
    cdef double[::1] e = np.ascontiguousarray(E, dtype=np.float64).ravel()
    cdef double[::1] t = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t n = e.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double hz1 = 0.25 * t[4] * t[4]
    cdef double hz2 = 0.25 * t[5] * t[5]
    cdef double hc = 0.25 * t[13] * t[13]
    cdef double filt, l1, l2
    with nogil:
        for i in range(n):
            filt = _lor(e[i], t[11], hc, 1.0)
            l1 = _lor(e[i], t[0], hz1, t[2]) + _psb(e[i], t[0], t[6], t[8], t[10])
            l2 = _lor(e[i], t[1], hz2, t[3]) + _psb(e[i], t[1], t[7], t[9], t[10])
            o[i] = (l1 * (1.0 + t[14] * filt) + l2 * (1.0 + t[15] * filt)
                    + t[12] * filt + t[16])
    return out.reshape(np.shape(E))


def convolve_valid(signal, kernel):
    cdef double[::1] s = np.ascontiguousarray(signal, dtype=np.float64)
    cdef double[::1] k = np.ascontiguousarray(np.asarray(kernel, dtype=np.float64)[::-1])
    cdef Py_ssize_t n = s.shape[0], m = k.shape[0], i, j, nout
    if m > n:
        raise ValueError("kernel longer than signal")
    nout = n - m + 1
    out = np.empty(nout, dtype=np.float64)
    cdef double[::1] o = out
    cdef double a0, a1, a2, a3, kj
    with nogil:
        # four outputs per pass share each kernel load
        i = 0
        while i + 4 <= nout:
            a0 = a1 = a2 = a3 = 0.0
            for j in range(m):
                kj = k[j]
                a0 = a0 + s[i + j] * kj
                a1 = a1 + s[i + j + 1] * kj
                a2 = a2 + s[i + j + 2] * kj
                a3 = a3 + s[i + j + 3] * kj
            o[i] = a0
            o[i + 1] = a1
            o[i + 2] = a2
            o[i + 3] = a3
            i += 4
        while i < nout:
            a0 = 0.0
            for j in range(m):
                a0 = a0 + s[i + j] * k[j]
            o[i] = a0
            i += 1
    return out
