"""
Gas temperature from a capsule SPRT read on a resistance bridge.

Near the water triple point the thermometer is linear in its resistance
ratio to the triple-point value,

    T = 273.16 K + s * [(ratio * r_std + c_self) / r_tpw - 1]

where ``ratio * r_std`` is the resistance measured at 1 mA and
``c_self`` the self-heating correction back to zero current.
"""

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .constants import T_TPW
from .errors import DomainError

#: Sensitivity dT / d(R/R_tpw) of the cSPRT near 273.16 K, in K.
S_DEFAULT = 250.7190

#: Temperature window around the triple point where the linear law holds, K.
VALIDITY_WINDOW = 0.1


class ValidityWarning(UserWarning):
    """Reading is outside the linearization window."""


@dataclass(frozen=True)
class BridgeReading:
    """
    One bridge reading.

    Attributes
    ----------
    ratio : float
        Bridge resistance ratio at 1 mA.
    r_std : float
        Standard resistor, ohm.
    r_tpw : float
        cSPRT resistance at 273.16 K, ohm.
    c_self : float
        Self-heating correction, ohm.
    s : float
        Sensitivity, K.
    """

    ratio: float
    r_std: float
    r_tpw: float
    c_self: float = 0.0
    s: float = S_DEFAULT

    def __post_init__(self):
        if self.r_tpw == 0:
            raise DomainError("r_tpw must be non-zero")
        for name in ("r_std", "r_tpw", "s"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not all(math.isfinite(v) for v in (self.ratio, self.c_self)):
            raise DomainError("ratio and c_self must be finite")


@dataclass(frozen=True)
class BridgeUncertainty:
    """Standard uncertainties of the bridge inputs (same units as the reading)."""

    u_ratio: float = 0.0
    u_rstd: float = 0.0
    u_rtpw: float = 0.0
    u_cself: float = 0.0

    def __post_init__(self):
        for name in ("u_ratio", "u_rstd", "u_rtpw", "u_cself"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and >= 0")


#: Working values of the bridge at the measurement (ohm, dimensionless).
REFERENCE_READING = BridgeReading(ratio=2.5519369, r_std=10.000516, r_tpw=25.517610, c_self=-68e-6)
#: Their standard uncertainties.
REFERENCE_UNCERTAINTY = BridgeUncertainty(u_ratio=1.0e-6, u_rstd=8e-6, u_rtpw=20e-6, u_cself=5e-6)


def temperature_from_bridge(b, warn=True):
    """
    Temperature of the cSPRT in K.

    A :class:`ValidityWarning` is emitted when the result lies more than
    0.1 K from 273.16 K, where the linear law stops being adequate.
    """
    t = T_TPW + b.s * ((b.ratio * b.r_std + b.c_self) / b.r_tpw - 1.0)
    if warn and abs(t - T_TPW) > VALIDITY_WINDOW:
        warnings.warn(
            f"T = {t:.6f} K is outside +-{VALIDITY_WINDOW} K of 273.16 K; linear law may be inaccurate",
            ValidityWarning,
            stacklevel=2,
        )
    return t


def temperature_contributions(b, u):
    """
    Individual temperature uncertainties (K) from each input, keyed by
    ``ratio``, ``r_std``, ``r_tpw`` and ``c_self``.
    """
    return {
        "ratio": b.s * u.u_ratio / b.ratio,
        "r_std": b.s * u.u_rstd / b.r_std,
        "r_tpw": b.s * u.u_rtpw / b.r_tpw,
        "c_self": b.s * u.u_cself / b.r_tpw,
    }


def temperature_uncertainty(b, u):
    """
    Combined standard uncertainty of the temperature, K.

    Relative input uncertainties add in quadrature and scale with ``s``.
    """
    return math.hypot(*temperature_contributions(b, u).values())


def monte_carlo_temperature(b, u, n=1_000_000, seed=0):
    """Sample the linear law with Gaussian inputs; returns (mean, std) in K."""
    rng = np.random.default_rng(seed)
    ratio = b.ratio + u.u_ratio * rng.standard_normal(n)
    r_std = b.r_std + u.u_rstd * rng.standard_normal(n)
    r_tpw = b.r_tpw + u.u_rtpw * rng.standard_normal(n)
    c_self = b.c_self + u.u_cself * rng.standard_normal(n)
    t = T_TPW + b.s * ((ratio * r_std + c_self) / r_tpw - 1.0)
    return float(t.mean()), float(t.std(ddof=1))


BRIDGE_LOG_HEADER = ["timestamp", "ratio", "r_std", "r_tpw", "c_self"]


def read_bridge_log(text, s=S_DEFAULT):
    """Parse a bridge log CSV into ``(timestamps, readings)``."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != BRIDGE_LOG_HEADER:
        raise DomainError("bridge log header must be " + ",".join(BRIDGE_LOG_HEADER))
    stamps, readings = [], []
    for row in reader:
        stamps.append(row["timestamp"])
        readings.append(BridgeReading(float(row["ratio"]), float(row["r_std"]),
                                      float(row["r_tpw"]), float(row["c_self"]), s))
    return stamps, readings


def temperature_series(text, s=S_DEFAULT, warn=True):
    """
    Convert a bridge log CSV to a ``timestamp,temperature_k`` CSV.

    Timestamps are copied verbatim.
    """
    stamps, readings = read_bridge_log(text, s)
    out = io.StringIO()
    out.write("timestamp,temperature_k\n")
    for stamp, reading in zip(stamps, readings):
        out.write(f"{stamp},{temperature_from_bridge(reading, warn):.9f}\n")
    return out.getvalue()
