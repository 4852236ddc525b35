"""
Physical constants and the Doppler width <-> Boltzmann constant map.

Unit conventions used throughout the package:

* frequencies and frequency detunings in MHz (linear, not angular)
* temperatures in K
* masses in kg (``amu_to_kg`` converts from unified atomic mass units)

The Doppler shift of a molecule moving with velocity component ``v_z``
along the beam is ``nu0 * v_z / c`` in the same linear units as ``nu0``.
No factor of 2 pi appears anywhere in the line-shape code.
"""

import math
from dataclasses import dataclass

from .errors import DomainError


@dataclass(frozen=True)
class PhysicalConstants:
    """A consistent set of fundamental constants (SI units)."""

    h: float
    c: float
    amu: float
    kB_reference: float

    def __post_init__(self):
        for name in ("h", "c", "amu", "kB_reference"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be strictly positive")


# CODATA 2010 recommended values (Mohr, Taylor & Newell, RMP 84, 1527 (2012)).
CODATA2010 = PhysicalConstants(
    h=6.62606957e-34,       # J s
    c=299792458.0,          # m/s, exact
    amu=1.660538921e-27,    # kg
    kB_reference=1.3806488e-23,  # J/K
)

KB_REFERENCE = CODATA2010.kB_reference

#: Triple point of water, K.
T_TPW = 273.16


def amu_to_kg(mass_amu, constants=CODATA2010):
    """Convert a mass in unified atomic mass units to kg."""
    return mass_amu * constants.amu


@dataclass(frozen=True)
class LineIdentity:
    """Centre frequency and absorber mass of one molecular line.

    Attributes
    ----------
    nu0 : float
        Line centre frequency in MHz.
    mass : float
        Molecular mass in kg.
    name : str
        Free-form label.
    """

    nu0: float
    mass: float
    name: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.nu0) and self.nu0 > 0):
            raise DomainError(f"line centre must be positive, got {self.nu0!r}")
        if not (math.isfinite(self.mass) and self.mass > 0):
            raise DomainError(f"molecular mass must be positive, got {self.mass!r}")


#: nu2 saQ(6,3) line of 14NH3 probed with the CO2 laser at 10.35 um.
NH3_SAQ63 = LineIdentity(
    nu0=28953693.9,
    mass=amu_to_kg(17.02655),
    name="14NH3 nu2 saQ(6,3)",
)


def _check_positive(value, what):
    if not (math.isfinite(value) and value > 0):
        raise DomainError(f"{what} must be finite and positive, got {value!r}")


def most_probable_speed(T, mass, kB=KB_REFERENCE):
    """Most probable speed sqrt(2 kB T / m) in m/s."""
    _check_positive(T, "temperature")
    _check_positive(mass, "mass")
    return math.sqrt(2.0 * kB * T / mass)


def doppler_width(T, line, kB=KB_REFERENCE, constants=CODATA2010):
    """
    e-fold Doppler half-width of a line.

    Parameters
    ----------
    T : float
        Gas temperature in K.
    line : LineIdentity
        Line centre and absorber mass.
    kB : float, optional
        Boltzmann constant used for the conversion (J/K).

    Returns
    -------
    float
        ``(nu0/c) * sqrt(2 kB T / m)`` in MHz.
    """
    _check_positive(T, "temperature")
    _check_positive(kB, "kB")
    return line.nu0 / constants.c * most_probable_speed(T, line.mass, kB)


def boltzmann_from_width(dnuD, T, line, constants=CODATA2010):
    """
    Boltzmann constant from a Doppler width and a temperature.

    Exact inverse of :func:`doppler_width`:
    ``kB = (dnuD/nu0)**2 * m c**2 / (2 T)``.

    Returns
    -------
    float
        k_B in J/K.
    """
    _check_positive(dnuD, "Doppler width")
    _check_positive(T, "temperature")
    ratio = dnuD / line.nu0
    return ratio * ratio * line.mass * constants.c ** 2 / (2.0 * T)
