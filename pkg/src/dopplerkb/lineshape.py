"""
Normalized absorption profiles.

All profiles are densities in 1/MHz of the detuning ``delta_nu`` (MHz)
from the unperturbed line centre and integrate to one over the real line.

The speed-dependent Voigt profile (SDVP) is computed from the velocity
average of complex Lorentzians over a Maxwell-Boltzmann distribution,

    I(x) = (1/pi) Re  integral  F_M(v) / (Gamma(v) - i [x - Delta(v) - k.v]) d^3v

After the angular integration, with ``u = v / v_tilde`` the reduced
speed, ``D`` the e-fold Doppler half-width and
``G(u) = Gamma(u) - i (x - Delta(u))``, this collapses to

    I(x) = 4 / (pi**1.5 D)  Re  integral_0^inf u exp(-u^2) arctan(D u / G(u)) du

(the log of the angular integral, ln[(G + iDu)/(G - iDu)], equals
2i arctan(Du/G); the principal branches agree because Re G > 0).
The remaining 1-D integral is done by Gauss-Legendre quadrature on
panels graded geometrically around the resonant speed, where the
integrand has an arctan step of width Gamma/D.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import wofz

from .errors import ConfigurationError, DomainError, NumericalError

SQRT_PI = math.sqrt(math.pi)

_CONSTANT = "constant"
_QUADRATIC = "quadratic"


def faddeeva(z):
    """
    Faddeeva function ``w(z) = exp(-z**2) erfc(-i z)``.

    Thin wrapper around :func:`scipy.special.wofz` that rejects NaN input.

    Parameters
    ----------
    z : complex or array_like of complex

    Returns
    -------
    complex or ndarray of complex
    """
    z = np.asarray(z, dtype=complex)
    if np.isnan(z).any():
        raise DomainError("faddeeva: NaN argument")
    out = wofz(z)
    return out[()] if out.ndim == 0 else out


def eval_gaussian(delta_nu, dnuD):
    """Unit-area Gaussian of e-fold half-width ``dnuD`` (MHz)."""
    if not dnuD > 0:
        raise DomainError(f"Doppler width must be positive, got {dnuD!r}")
    x = np.asarray(delta_nu, dtype=float) / dnuD
    return np.exp(-x * x) / (dnuD * SQRT_PI)


def eval_lorentzian(delta_nu, gamma):
    """Unit-area Lorentzian of half-width at half-maximum ``gamma`` (MHz)."""
    if not gamma > 0:
        raise DomainError(f"Lorentzian half-width must be positive, got {gamma!r}")
    x = np.asarray(delta_nu, dtype=float)
    return gamma / (math.pi * (gamma * gamma + x * x))


@dataclass(frozen=True)
class SpeedDependenceLaw:
    """
    How collisional broadening and shift depend on molecular speed.

    ``constant``: Gamma(v) = gamma0, Delta(v) = delta0.

    ``quadratic``: with ``u = v / v_tilde``,
    Gamma(v) = gamma0 [1 + m_sd (u^2 - 3/2)] and
    Delta(v) = delta0 [1 + n_sd (u^2 - 3/2)].
    Both average to (gamma0, delta0) over the Maxwell-Boltzmann speeds.
    """

    kind: str = _CONSTANT
    m_sd: float = 0.0
    n_sd: float = 0.0

    def __post_init__(self):
        if self.kind not in (_CONSTANT, _QUADRATIC):
            raise ConfigurationError(f"unknown speed-dependence law {self.kind!r}")

    @classmethod
    def constant(cls):
        return cls(_CONSTANT)

    @classmethod
    def quadratic(cls, m_sd, n_sd):
        return cls(_QUADRATIC, float(m_sd), float(n_sd))

    @property
    def is_constant(self):
        return self.kind == _CONSTANT or (self.m_sd == 0.0 and self.n_sd == 0.0)

    def broadening(self, u, gamma0):
        """Gamma at reduced speed ``u`` (array or scalar)."""
        if self.kind == _CONSTANT:
            return gamma0 + 0.0 * np.asarray(u, dtype=float)
        return gamma0 * (1.0 + self.m_sd * (np.square(u) - 1.5))

    def shift(self, u, delta0):
        """Delta at reduced speed ``u`` (array or scalar)."""
        if self.kind == _CONSTANT:
            return delta0 + 0.0 * np.asarray(u, dtype=float)
        return delta0 * (1.0 + self.n_sd * (np.square(u) - 1.5))

    def check(self, gamma0, u_max):
        """Raise ConfigurationError unless Gamma(u) > 0 on [0, u_max]."""
        if self.kind == _CONSTANT:
            return
        # quadratic in u: extremes sit at the interval ends
        g_lo = float(self.broadening(0.0, gamma0))
        g_hi = float(self.broadening(u_max, gamma0))
        if not (g_lo > 0 and g_hi > 0):
            raise ConfigurationError(
                f"quadratic law with m_sd={self.m_sd} gives non-positive broadening "
                f"on [0, {u_max}] v_tilde (Gamma(0)={g_lo:.3g}, Gamma(max)={g_hi:.3g})"
            )


def eval_speed_law(v, v_tilde, gamma0, delta0, law, v_max=None):
    """
    Collisional broadening and shift at speed ``v``.

    Parameters
    ----------
    v : float or array_like
        Molecular speed (m/s), ``v >= 0``.
    v_tilde : float
        Most probable speed (m/s).
    gamma0, delta0 : float
        Speed-averaged broadening and shift (MHz).
    law : SpeedDependenceLaw
    v_max : float, optional
        Upper end of the speed range checked for Gamma > 0; defaults to
        ``6 * v_tilde``.

    Returns
    -------
    (Gamma, Delta) : tuple of float or ndarray, MHz
    """
    if not v_tilde > 0:
        raise DomainError("v_tilde must be positive")
    v = np.asarray(v, dtype=float)
    if (v < 0).any():
        raise DomainError("speed must be non-negative")
    u_max = 6.0 if v_max is None else v_max / v_tilde
    if gamma0 > 0:
        law.check(gamma0, u_max)
    u = v / v_tilde
    g = law.broadening(u, gamma0)
    d = law.shift(u, delta0)
    if g.ndim == 0:
        return float(g), float(d)
    return g, d


@dataclass(frozen=True)
class LineShapeParams:
    """
    Physics of one line.

    Attributes
    ----------
    dnuD : float
        e-fold Doppler half-width (MHz).
    gamma : float
        Speed-averaged collisional half-width at half-maximum (MHz).
    delta : float
        Speed-averaged collisional shift (MHz).
    law : SpeedDependenceLaw
    """

    dnuD: float
    gamma: float = 0.0
    delta: float = 0.0
    law: SpeedDependenceLaw = field(default_factory=SpeedDependenceLaw)

    def __post_init__(self):
        if not (math.isfinite(self.dnuD) and self.dnuD > 0):
            raise DomainError(f"dnuD must be positive, got {self.dnuD!r}")
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise DomainError(f"gamma must be >= 0, got {self.gamma!r}")
        if not math.isfinite(self.delta):
            raise DomainError("delta must be finite")

    def replace(self, **changes):
        values = dict(dnuD=self.dnuD, gamma=self.gamma, delta=self.delta, law=self.law)
        values.update(changes)
        return LineShapeParams(**values)


def eval_voigt(delta_nu, params):
    """
    Voigt profile: Gaussian of width ``dnuD`` convolved with a Lorentzian
    of half-width ``gamma`` centred at ``delta``.

    The speed-dependence law is ignored.
    """
    x = np.asarray(delta_nu, dtype=float) - params.delta
    if params.gamma == 0.0:
        return eval_gaussian(x, params.dnuD)
    z = (x + 1j * params.gamma) / params.dnuD
    return wofz(z).real / (params.dnuD * SQRT_PI)


@dataclass(frozen=True)
class QuadratureConfig:
    """
    Settings of the speed quadrature used by :func:`eval_sdvp`.

    Attributes
    ----------
    nodes : int
        Gauss-Legendre order per panel for the first estimate (or the only
        one when ``adaptive`` is False).
    max_nodes : int
        Largest per-panel order tried before giving up.
    rtol : float
        Convergence threshold on the relative change between successive
        doublings, taken pointwise over the frequency grid.
    u_max : float
        Truncation of the speed integral in units of the most probable
        speed.
    adaptive : bool
        If False, evaluate once with ``nodes`` (used by the fitter so that
        finite-difference derivatives see a fixed rule).
    grading : float
        Ratio between successive panel widths away from the resonance.
    levels : int, optional
        Number of graded panels on each side of the resonance. By default
        it is derived from the narrowest resonance on the grid; freezing it
        keeps the rule a smooth function of the line parameters.
    """

    nodes: int = 16
    max_nodes: int = 512
    rtol: float = 1e-9
    u_max: float = 6.0
    adaptive: bool = True
    grading: float = 4.0
    levels: int = None

    def __post_init__(self):
        if self.nodes < 4:
            raise ConfigurationError("at least 4 Gauss-Legendre nodes per panel required")
        if self.max_nodes < self.nodes:
            raise ConfigurationError("max_nodes < nodes")
        if not self.u_max > 0 or not self.grading > 1:
            raise ConfigurationError("u_max must be > 0 and grading > 1")

    def fixed(self, nodes, levels=None):
        """Non-adaptive copy using ``nodes`` per panel."""
        return QuadratureConfig(nodes, max(nodes, self.max_nodes), self.rtol,
                                self.u_max, False, self.grading, levels)


_LEGGAUSS = {}


def _leggauss(n):
    if n not in _LEGGAUSS:
        _LEGGAUSS[n] = np.polynomial.legendre.leggauss(n)
    return _LEGGAUSS[n]


def grading_levels(width, quad):
    """Panels per side needed to grade from ``width`` up to ``u_max``."""
    return max(int(math.ceil(math.log(quad.u_max / width) / math.log(quad.grading))) + 1, 1)


def resonance_width(delta_nu, params, quad=QuadratureConfig()):
    """Smallest Gamma(u*)/dnuD over the detunings, in reduced-speed units."""
    x = np.atleast_1d(np.asarray(delta_nu, dtype=float))
    edges_w = params.law.broadening(np.minimum(np.abs(x - params.delta) / params.dnuD,
                                               quad.u_max), params.gamma) / params.dnuD
    return float(max(np.min(edges_w), 1e-14))


def _panel_edges(x, params, quad):
    """Panel boundaries in reduced speed, one row per detuning."""
    D = params.dnuD
    law = params.law
    U = quad.u_max
    # resonant speed: D u = |x - Delta(u)|, solved by fixed-point iteration
    ustar = np.abs(x - params.delta) / D
    for _ in range(4):
        ustar = np.abs(x - law.shift(np.minimum(ustar, U), params.delta)) / D
    width = law.broadening(np.minimum(ustar, U), params.gamma) / D
    width = np.maximum(width, 1e-14)
    n_levels = quad.levels or grading_levels(width.min(), quad)
    offsets = width[:, None] * quad.grading ** np.arange(n_levels)[None, :]
    edges = np.concatenate(
        [
            np.zeros((x.size, 1)),
            np.full((x.size, 1), U),
            ustar[:, None],
            ustar[:, None] - offsets,
            ustar[:, None] + offsets,
        ],
        axis=1,
    )
    return np.sort(np.clip(edges, 0.0, U), axis=1)


def _sdvp_fixed(x, params, quad, nodes, chunk=256):
    D = params.dnuD
    law = params.law
    t, w = _leggauss(nodes)
    out = np.empty(x.size)
    for start in range(0, x.size, chunk):
        xs = x[start:start + chunk]
        edges = _panel_edges(xs, params, quad)
        a, b = edges[:, :-1, None], edges[:, 1:, None]
        half = 0.5 * (b - a)
        u = 0.5 * (a + b) + half * t
        wt = half * w
        g = law.broadening(u, params.gamma) - 1j * (xs[:, None, None] - law.shift(u, params.delta))
        z = D * u / g
        small = np.abs(z) < 1e-12
        zsafe = np.where(small, 1.0, z)
        # arctan(z)/z -> 1 at the removable singularity u -> 0
        ratio = np.where(small, 1.0, np.arctan(zsafe) / zsafe)
        vals = (wt * u * u * np.exp(-u * u) * ratio / g).real
        out[start:start + chunk] = vals.sum(axis=(1, 2))
    return out * (4.0 / math.pi ** 1.5)


def sdvp_adaptive(delta_nu, params, quad=QuadratureConfig()):
    """
    Evaluate the SDVP and report the quadrature order that was used.

    Returns
    -------
    values : ndarray
    nodes : int
        Per-panel Gauss-Legendre order of the returned estimate.
    """
    x = np.atleast_1d(np.asarray(delta_nu, dtype=float))
    if params.gamma <= 0:
        if params.law.is_constant or params.law.kind == _CONSTANT:
            return eval_gaussian(x - params.delta, params.dnuD), 0
        raise ConfigurationError("speed-dependent profile needs gamma > 0")
    params.law.check(params.gamma, quad.u_max)

    nodes = quad.nodes
    current = _sdvp_fixed(x, params, quad, nodes)
    if not quad.adaptive:
        return current, nodes
    change = np.inf
    while 2 * nodes <= quad.max_nodes:
        nodes *= 2
        refined = _sdvp_fixed(x, params, quad, nodes)
        change = float(np.max(np.abs(refined - current) / np.abs(refined)))
        current = refined
        if change < quad.rtol:
            return current, nodes
    raise NumericalError(
        "SDVP speed quadrature did not converge",
        {"nodes": nodes, "last_relative_change": change, "rtol": quad.rtol},
    )


def eval_sdvp(delta_nu, params, quad=QuadratureConfig()):
    """
    Speed-dependent Voigt profile.

    Parameters
    ----------
    delta_nu : float or array_like
        Detuning from the unperturbed line centre (MHz).
    params : LineShapeParams
    quad : QuadratureConfig, optional

    Returns
    -------
    ndarray
        Profile values in 1/MHz.

    Raises
    ------
    NumericalError
        If successive node doublings keep changing the result by more
        than ``quad.rtol`` up to ``quad.max_nodes``.
    """
    values, _ = sdvp_adaptive(delta_nu, params, quad)
    return values if np.ndim(delta_nu) else values[0]


PROFILES = ("gaussian", "voigt", "sdvp")


def eval_profile(delta_nu, params, kind="voigt", quad=QuadratureConfig()):
    """Dispatch to one of the profiles by name."""
    if kind == "gaussian":
        return eval_gaussian(np.asarray(delta_nu, dtype=float) - params.delta, params.dnuD)
    if kind == "voigt":
        return eval_voigt(delta_nu, params)
    if kind == "sdvp":
        return eval_sdvp(delta_nu, params, quad)
    raise ConfigurationError(f"unknown profile {kind!r}; expected one of {PROFILES}")


def fwhm(params, kind="voigt", quad=QuadratureConfig()):
    """Full width at half maximum, found by bisection on each side of the peak."""
    def f(x):
        return float(eval_profile(np.array([x]), params, kind, quad)[0])

    scan = np.linspace(-3 * params.dnuD, 3 * params.dnuD, 6001) + params.delta
    vals = eval_profile(scan, params, kind, quad)
    i_pk = int(np.argmax(vals))
    x_pk = scan[i_pk]
    half = 0.5 * vals[i_pk]
    span = 10 * (params.dnuD + params.gamma)
    left = brentq(lambda x: f(x) - half, x_pk - span, x_pk, xtol=1e-12)
    right = brentq(lambda x: f(x) - half, x_pk, x_pk + span, xtol=1e-12)
    return right - left
