"""Weighted nonlinear least squares with bounds, fixed and tied parameters.

The solver is a Levenberg-Marquardt iteration carried out in an internal,
unbounded coordinate system (MINUIT-style transforms), so bounded parameters
never leave their interval while the covariance is still computed from the
Jacobian in the external coordinates.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Callable, Mapping, Sequence

import numpy as np

_logger = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


class DegenerateFitError(FitError):
    """The normal matrix is singular; ``pair`` names the offending parameters."""

    def __init__(self, pair, detail=""):
        self.pair = tuple(pair)
        msg = f"degenerate parameters {self.pair[0]!r} and {self.pair[1]!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass
class ParamSpec:
    name: str
    init: float
    lower: float = -np.inf
    upper: float = np.inf
    fixed: bool = False
    tie: str | None = None

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"{self.name}: lower > upper")
        if self.tie is None and not (self.lower <= self.init <= self.upper):
            raise ValueError(
                f"{self.name}: init {self.init!r} outside [{self.lower}, {self.upper}]")
        if self.tie is not None and self.fixed:
            raise ValueError(f"{self.name}: a tied parameter cannot also be fixed")


@dataclass
class FitResult:
    estimates: dict
    sigmas: dict
    covariance: np.ndarray
    free_names: list
    chi2: float
    dof: int
    converged: bool
    n_iter: int
    chi2_history: list = field(default_factory=list)
    n_points: int = 0
    message: str = ""

    @property
    def redchi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else math.nan

    def __getitem__(self, name):
        return self.estimates[name]

    def correlation(self) -> np.ndarray:
        d = np.sqrt(np.diag(self.covariance))
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.covariance / np.outer(d, d)


@dataclass(frozen=True)
class WeightedSample:
    value: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be finite and > 0, got {self.sigma!r}")


def weighted_average(samples: Sequence[WeightedSample]) -> WeightedSample:
    """Inverse-variance weighted mean and its propagated standard error."""
    if len(samples) == 0:
        raise ValueError("weighted_average of an empty list")
    v = np.array([s.value for s in samples], dtype=np.float64)
    w = 1.0 / np.array([s.sigma for s in samples], dtype=np.float64) ** 2
    wsum = w.sum()
    mean = float(np.dot(w, v) / wsum)
    # guard against rounding pushing the mean outside the sample range
    mean = min(max(mean, float(v.min())), float(v.max()))
    return WeightedSample(mean, float(math.sqrt(1.0 / wsum)))


class _Transform:
    """Map between the bounded external value and an unbounded internal one."""

    def __init__(self, lower, upper, init):
        self.lo, self.hi = lower, upper
        self.kind = (np.isfinite(lower), np.isfinite(upper))
        span = abs(init - lower) if np.isfinite(lower) else abs(upper - init)
        self.s = span if span > 0 else max(abs(init), 1.0)

    def to_int(self, x):
        lo, hi, s = self.lo, self.hi, self.s
        if self.kind == (True, True):
            z = 2.0 * (x - lo) / (hi - lo) - 1.0
            return math.asin(min(max(z, -1.0), 1.0))
        if self.kind == (True, False):
            q = (x - lo) / s + 1.0
            return math.sqrt(max(q * q - 1.0, 0.0))
        if self.kind == (False, True):
            q = (hi - x) / s + 1.0
            return math.sqrt(max(q * q - 1.0, 0.0))
        return x

    def to_ext(self, u):
        lo, hi, s = self.lo, self.hi, self.s
        if self.kind == (True, True):
            return lo + 0.5 * (hi - lo) * (math.sin(u) + 1.0)
        if self.kind == (True, False):
            return lo + s * (math.sqrt(u * u + 1.0) - 1.0)
        if self.kind == (False, True):
            return hi - s * (math.sqrt(u * u + 1.0) - 1.0)
        return u

    def deriv(self, u):
        lo, hi, s = self.lo, self.hi, self.s
        if self.kind == (True, True):
            return 0.5 * (hi - lo) * math.cos(u)
        if self.kind == (True, False):
            return s * u / math.sqrt(u * u + 1.0)
        if self.kind == (False, True):
            return -s * u / math.sqrt(u * u + 1.0)
        return 1.0

    def deriv2(self, u):
        lo, hi, s = self.lo, self.hi, self.s
        if self.kind == (True, True):
            return -0.5 * (hi - lo) * math.sin(u)
        if self.kind == (True, False):
            return s / (u * u + 1.0) ** 1.5
        if self.kind == (False, True):
            return -s / (u * u + 1.0) ** 1.5
        return 0.0


class _Problem:
    """Bookkeeping for free/fixed/tied parameters of one fit."""

    def __init__(self, params: Sequence[ParamSpec]):
        self.specs = {p.name: p for p in params}
        if len(self.specs) != len(params):
            raise ValueError("duplicate parameter names")
        self.names = [p.name for p in params]
        for p in params:
            if p.tie is not None:
                master = self.specs.get(p.tie)
                if master is None:
                    raise ValueError(f"{p.name}: unknown tie target {p.tie!r}")
                if master.tie is not None:
                    raise ValueError(f"{p.name}: chained ties are not supported")
        self.free = [p.name for p in params if not p.fixed and p.tie is None]
        self.tf = [_Transform(self.specs[n].lower, self.specs[n].upper, self.specs[n].init)
                   for n in self.free]
        self.init = np.array([self.specs[n].init for n in self.free], dtype=np.float64)
        typical = np.abs(self.init)
        self.typical = np.where(typical > 0, typical, 1.0)

    def values(self, xfree) -> dict:
        vals = {}
        for n in self.names:
            p = self.specs[n]
            if p.tie is None:
                vals[n] = p.init
        for n, x in zip(self.free, xfree):
            vals[n] = float(x)
        for n in self.names:
            p = self.specs[n]
            if p.tie is not None:
                vals[n] = vals[p.tie]
        return vals

    def to_ext(self, u):
        return np.array([t.to_ext(ui) for t, ui in zip(self.tf, u)])

    def to_int(self, x):
        return np.array([t.to_int(xi) for t, xi in zip(self.tf, x)])

    def deriv(self, u):
        return np.array([t.deriv(ui) for t, ui in zip(self.tf, u)])

    def deriv2(self, u):
        return np.array([t.deriv2(ui) for t, ui in zip(self.tf, u)])


def _jacobian(fun, x, typical, rel_step=1e-7):
    """Central-difference Jacobian of ``fun`` at external point ``x``.

    A column with no visible change (a parameter sitting near zero with a
    tiny typical scale) is retried with a step up to 1e12 times larger.
    """
    cols = []
    for j in range(x.size):
        h = rel_step * max(abs(x[j]), typical[j])
        for _ in range(5):
            xp = x.copy()
            xm = x.copy()
            xp[j] += h
            xm[j] -= h
            col = (fun(xp) - fun(xm)) / (2.0 * h)
            if np.any(col != 0.0):
                break
            h *= 1e3
        cols.append(col)
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def _degenerate_pair(A, names):
    d = np.diag(A)
    dmax = d.max() if d.size else 0.0
    for i, di in enumerate(d):
        if not di > 1e-300 or di < 1e-28 * dmax:
            other = names[(i + 1) % len(names)] if len(names) > 1 else names[i]
            return (names[i], other), "no sensitivity to the first parameter"
    s = 1.0 / np.sqrt(d)
    N = A * np.outer(s, s)
    evals, evecs = np.linalg.eigh(N)
    if evals[0] < 1e-13 * evals[-1]:
        v = np.abs(evecs[:, 0])
        i, j = np.argsort(v)[::-1][:2]
        return (names[i], names[j]), f"normalized eigenvalue {evals[0]:.2e}"
    return None


def least_squares(model: Callable[[np.ndarray, Mapping[str, float]], np.ndarray],
                  params: Sequence[ParamSpec], x, y, sigma=None, mask=None,
                  max_iter: int = 200, ftol: float = 1e-10, xtol: float = 1e-10,
                  lambda0: float = 1e-3, edm_tol: float = 1e-8,
                  quiet: bool = False) -> FitResult:
    """Fit ``model(x, values)`` to ``y``.

    Residuals are weighted by ``1/sigma**2`` when ``sigma`` is given and by the
    Poisson weight ``1/max(y, 1)`` otherwise. The returned covariance is
    ``(J^T W J)^-1`` scaled by the reduced chi-square.

    Parameters
    ----------
    model : callable
        ``model(x, values)`` where ``values`` maps every parameter name
        (fixed and tied ones included) to a float.
    params : sequence of ParamSpec
    x, y : array_like
        Abscissae and data.
    sigma : array_like, optional
        Per-point standard deviations.
    mask : array_like of bool or callable, optional
        Points to include; a callable is applied to ``x``.
    max_iter : int
        Jacobian evaluations before giving up with ``converged=False``.
    edm_tol : float
        Stop once the predicted chi-square decrease ``g^T A^-1 g / 2`` falls
        below ``edm_tol * max(chi2, 1)``; this ends fits where a parameter
        creeps toward a bound with vanishing gain.
    quiet : bool
        Do not log non-convergence (the caller checks ``converged``).

    Raises
    ------
    FitError
        When fewer points than free parameters + 1 remain.
    DegenerateFitError
        When the normal matrix at the optimum is singular.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mask is not None:
        m = mask(x) if callable(mask) else np.asarray(mask, dtype=bool)
        x, y = x[m], y[m]
        if sigma is not None:
            sigma = np.asarray(sigma, dtype=np.float64)[m]
    if sigma is None:
        w = 1.0 / np.maximum(y, 1.0)
    else:
        w = 1.0 / np.asarray(sigma, dtype=np.float64) ** 2
    sw = np.sqrt(w)

    prob = _Problem(params)
    k = len(prob.free)
    n = y.size

    def resid(xfree):
        return sw * (y - model(x, prob.values(xfree)))

    if k == 0:
        r = resid(np.empty(0))
        chi2 = float(r @ r)
        vals = prob.values(np.empty(0))
        return FitResult(vals, {nm: 0.0 for nm in vals}, np.zeros((0, 0)), [],
                         chi2, n, True, 0, [chi2], n, "all parameters fixed")
    dof = n - k
    if dof < 1:
        raise FitError(f"{n} points for {k} free parameters: dof must be >= 1")

    def fext(xfree):
        return model(x, prob.values(xfree))

    u = prob.to_int(prob.init)
    # a start exactly on a bound has zero transform slope; step inside
    for j, t in enumerate(prob.tf):
        if t.kind != (False, False) and abs(t.deriv(u[j])) < 1e-12:
            u[j] += 1e-2 if t.kind != (True, True) or u[j] < 0 else -1e-2
    xcur = prob.to_ext(u)
    r = resid(xcur)
    chi2 = float(r @ r)
    history = [chi2]
    lam = lambda0
    converged = False
    message = "maximum iterations reached"
    n_iter = 0

    while n_iter < max_iter:
        n_iter += 1
        J = -sw[:, None] * _jacobian(fext, xcur, prob.typical)
        Ju = J * prob.deriv(u)[None, :]
        A = Ju.T @ Ju
        g = -Ju.T @ r
        # curvature of the bound transforms; matters when the optimum sits on a bound
        A[np.diag_indices_from(A)] += np.maximum((J.T @ r) * prob.deriv2(u), 0.0)
        D = np.diag(A).copy()
        dmax = D.max()
        D = np.maximum(D, 1e-12 * dmax if dmax > 0 else 1.0)
        try:
            edm = 0.5 * float(g @ np.linalg.solve(A + 1e-12 * np.diag(D), g))
        except np.linalg.LinAlgError:
            edm = math.inf
        if edm < edm_tol * max(chi2, 1.0):
            converged = True
            message = "estimated distance to minimum below tolerance"
            break
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(D), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            u_new = u + step
            x_new = prob.to_ext(u_new)
            r_new = resid(x_new)
            chi2_new = float(r_new @ r_new)
            if np.isfinite(chi2_new) and chi2_new < chi2:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
            message = "no further decrease in chi-square"
            break
        small_step = np.all(np.abs(x_new - xcur) <= xtol * (np.abs(xcur) + xtol))
        small_drop = (chi2 - chi2_new) <= ftol * chi2_new
        u, xcur, r, chi2 = u_new, x_new, r_new, chi2_new
        history.append(chi2)
        lam = max(lam / 10.0, 1e-15)
        if small_step or small_drop:
            converged = True
            message = "converged"
            break

    if not converged and not quiet:
        _logger.warning("least_squares: %s after %d iterations", message, n_iter)

    J = -sw[:, None] * _jacobian(fext, xcur, prob.typical)
    A = J.T @ J
    bad = _degenerate_pair(A, prob.free)
    if bad is not None:
        raise DegenerateFitError(*bad)
    cov = np.linalg.inv(A) * (chi2 / dof)
    cov = 0.5 * (cov + cov.T)
    vals = prob.values(xcur)
    sig_free = dict(zip(prob.free, np.sqrt(np.clip(np.diag(cov), 0.0, None))))
    sigmas = {}
    for nm in prob.names:
        spec = prob.specs[nm]
        if spec.tie is not None:
            sigmas[nm] = float(sig_free.get(spec.tie, 0.0))
        else:
            sigmas[nm] = float(sig_free.get(nm, 0.0))
    return FitResult(vals, sigmas, cov, list(prob.free), chi2, dof, converged,
                     n_iter, history, n, message)


def poisson_least_squares(model, params: Sequence[ParamSpec], x, y, counts_per_unit=1.0,
                          mask=None, max_iter: int = 200, max_reweight: int = 10,
                          tol: float = 1e-3, floor: float = 1e-3) -> FitResult:
    """Least squares with Poisson variances taken from the model, not the data.

    Starts from the ``1/max(y, 1)`` weighted fit and refits with variance
    ``model / counts_per_unit`` (``y`` may be counts divided by
    ``counts_per_unit``) until no free parameter moves by more than ``tol``
    of its standard error. The fixed point solves the Poisson likelihood
    equations, which removes the downward bias of data-weighted fits at low
    counts.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mask is not None:
        m = mask(x) if callable(mask) else np.asarray(mask, dtype=bool)
        x, y = x[m], y[m]
    c = float(counts_per_unit)
    res = least_squares(model, params, x, y,
                        sigma=np.sqrt(np.maximum(y * c, 1.0)) / c, max_iter=max_iter)
    by_name = {p.name: p for p in params}
    for _ in range(max_reweight):
        mu = model(x, res.estimates)
        sigma = np.sqrt(np.maximum(mu * c, floor)) / c
        start = [ParamSpec(p.name, float(np.clip(res[p.name], p.lower, p.upper)),
                           p.lower, p.upper, p.fixed, p.tie) if p.tie is None else p
                 for p in by_name.values()]
        new = least_squares(model, start, x, y, sigma=sigma, max_iter=max_iter)
        moved = max((abs(new[nm] - res[nm]) / new.sigmas[nm]
                     for nm in new.free_names if new.sigmas[nm] > 0), default=0.0)
        res = new
        if moved <= tol:
            break
    else:
        _logger.warning("poisson_least_squares: reweighting did not settle")
    return res
