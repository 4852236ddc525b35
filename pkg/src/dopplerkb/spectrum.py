"""
Synthetic transmission spectra.

The detected power follows a Beer-Lambert law on an affine baseline,

    P(nu) = (p0 + p1 (nu - omega0)) * exp(-A * I(nu - omega0))

with ``I`` a unit-area profile in 1/MHz, so that the integrated
absorbance ``A`` is expressed in MHz.
"""

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError
from .lineshape import QuadratureConfig, eval_profile

# exp(-x) underflows to 0 in double precision past this exponent
_EXP_LIMIT = 745.0


@dataclass(frozen=True)
class FrequencyGrid:
    """Uniform laser frequency grid (MHz)."""

    start: float
    step: float
    count: int

    def __post_init__(self):
        if not self.step > 0:
            raise DomainError("grid step must be positive")
        if int(self.count) != self.count or self.count < 2:
            raise DomainError("grid needs at least 2 points")

    @classmethod
    def centered(cls, span, step, center=0.0):
        """Grid of ``span`` MHz around ``center``, both ends included."""
        count = int(round(span / step)) + 1
        return cls(center - 0.5 * (count - 1) * step, step, count)

    @property
    def span(self):
        return self.step * (self.count - 1)

    def frequencies(self):
        return self.start + self.step * np.arange(self.count)


@dataclass(frozen=True)
class TransmissionParams:
    """Baseline and absorption parameters of the Beer-Lambert model."""

    p0: float
    p1: float = 0.0
    omega0: float = 0.0
    absorbance: float = 0.0

    def __post_init__(self):
        if not self.p0 > 0:
            raise DomainError("baseline offset p0 must be positive")
        if not self.absorbance >= 0:
            raise DomainError("absorbance must be >= 0")


@dataclass
class SpectrumRecord:
    """
    One recorded (or synthesized) spectrum.

    ``meta`` holds free-form scalars; the ones the package understands are
    ``pressure`` (Pa), ``path`` (m), ``temperature_nominal`` (K), ``seed``,
    ``label``, ``p0`` and ``saturated``.
    """

    grid: FrequencyGrid
    signal: np.ndarray
    sigma: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=float)
        if self.signal.shape != (self.grid.count,):
            raise DomainError("signal length does not match the grid")
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)
            if self.sigma.shape != self.signal.shape:
                raise DomainError("sigma length does not match the grid")
            if not (self.sigma > 0).all():
                raise DomainError("sigma must be positive")

    @property
    def frequencies(self):
        return self.grid.frequencies()

    @property
    def saturated(self):
        return bool(self.meta.get("saturated", False))


@dataclass(frozen=True)
class HyperfineComponent:
    """One hyperfine component: offset from the multiplet centroid, weight."""

    offset: float
    weight: float

    def __post_init__(self):
        if not self.weight > 0:
            raise DomainError("hyperfine weights must be positive")


def _profile_kind(lp, profile):
    if profile != "auto":
        return profile
    return "voigt" if lp.law.is_constant else "sdvp"


def _beer_lambert(nu, tp, optical_depth, meta):
    """Apply the baseline and exp(-tau); clamp underflow and flag it."""
    baseline = tp.p0 + tp.p1 * (nu - tp.omega0)
    saturated = bool((optical_depth > _EXP_LIMIT).any())
    trans = np.where(optical_depth > _EXP_LIMIT, 0.0, np.exp(-np.minimum(optical_depth, _EXP_LIMIT)))
    meta = dict(meta)
    meta["p0"] = tp.p0
    meta["saturated"] = saturated
    return baseline * trans, meta


def synth_transmission(grid, tp, lp, profile="auto", quad=QuadratureConfig(), meta=None):
    """
    Noiseless transmission spectrum of one line.

    Parameters
    ----------
    grid : FrequencyGrid
    tp : TransmissionParams
    lp : LineShapeParams
    profile : {"auto", "gaussian", "voigt", "sdvp"}
        ``auto`` uses the SDVP whenever the law carries speed dependence.
    meta : dict, optional
        Copied into the record.

    Returns
    -------
    SpectrumRecord
    """
    nu = grid.frequencies()
    if tp.absorbance == 0.0:
        tau = np.zeros_like(nu)
    else:
        tau = tp.absorbance * eval_profile(nu - tp.omega0, lp, _profile_kind(lp, profile), quad)
    signal, meta = _beer_lambert(nu, tp, tau, meta or {})
    return SpectrumRecord(grid, signal, None, meta)


def add_noise(rec, snr, seed, p0=None):
    """
    Add white Gaussian noise of standard deviation ``p0 / snr``.

    ``snr=math.inf`` (or None) is the no-noise sentinel and returns an
    unchanged copy. ``p0`` defaults to the baseline offset recorded by the
    synthesizer.
    """
    if snr is None or snr == math.inf:
        return replace(rec, meta=dict(rec.meta))
    if not snr > 0:
        raise DomainError("snr must be positive (use math.inf for no noise)")
    if p0 is None:
        p0 = rec.meta.get("p0", float(np.max(np.abs(rec.signal))))
    std = p0 / snr
    rng = np.random.default_rng(seed)
    noisy = rec.signal + rng.normal(0.0, std, rec.signal.shape)
    meta = dict(rec.meta, seed=seed, snr=snr)
    return SpectrumRecord(rec.grid, noisy, np.full(rec.signal.shape, std), meta)


def multiplet_profile(delta_nu, lp, components, profile="auto", quad=QuadratureConfig()):
    """Weighted sum of shifted copies of one profile."""
    if not components:
        raise DomainError("multiplet needs at least one component")
    kind = _profile_kind(lp, profile)
    x = np.asarray(delta_nu, dtype=float)
    total = np.zeros_like(x)
    for comp in components:
        total += comp.weight * eval_profile(x - comp.offset, lp, kind, quad)
    return total


def synth_multiplet(grid, tp, lp, components, profile="auto", quad=QuadratureConfig(), meta=None):
    """Like :func:`synth_transmission` with a multiplet in place of one profile."""
    nu = grid.frequencies()
    tau = tp.absorbance * multiplet_profile(nu - tp.omega0, lp, components, profile, quad)
    signal, meta = _beer_lambert(nu, tp, tau, meta or {})
    return SpectrumRecord(grid, signal, None, meta)


def apply_modulation(grid, tp, lp, f1, index, profile="auto", quad=QuadratureConfig(), meta=None):
    """
    First-harmonic signal of an amplitude-modulated probe.

    The probe carries field amplitudes (1, index/2, index/2) at
    (nu, nu + f1, nu - f1). Each is attenuated by the amplitude
    transmission ``t = exp(-A I / 2)``; dispersion of the gas is ignored.
    The beat at f1 is proportional to ``t(nu) [t(nu + f1) + t(nu - f1)]
    index / 2`` and is scaled by the baseline.

    Parameters
    ----------
    f1 : float
        Modulation frequency (MHz).
    index : float
        Modulation index.
    """
    if not f1 > 0:
        raise DomainError("modulation frequency must be positive")
    if f1 > grid.span:
        raise DomainError("modulation frequency exceeds the grid span")
    nu = grid.frequencies()
    kind = _profile_kind(lp, profile)
    x = nu - tp.omega0
    tau = [tp.absorbance * eval_profile(x + s, lp, kind, quad) for s in (0.0, f1, -f1)]
    amp = [np.exp(-0.5 * np.minimum(t, 2 * _EXP_LIMIT)) for t in tau]
    baseline = tp.p0 + tp.p1 * x
    signal = baseline * amp[0] * (amp[1] + amp[2]) * (0.5 * index)
    meta = dict(meta or {}, p0=tp.p0, f1=f1, modulation_index=index,
                saturated=bool(max(t.max() for t in tau) > _EXP_LIMIT))
    return SpectrumRecord(grid, signal, None, meta)


# -- file formats -------------------------------------------------------------

def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _parse_value(text):
    if text in ("true", "false"):
        return text == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def spectrum_to_csv(rec):
    """Serialize a record: ``# key=value`` lines, then a CSV table."""
    buf = io.StringIO()
    head = {"grid_start": float(rec.grid.start), "grid_step": float(rec.grid.step),
            "grid_count": int(rec.grid.count)}
    for key, value in {**head, **rec.meta}.items():
        buf.write(f"# {key}={_format_value(value)}\n")
    has_sigma = rec.sigma is not None
    buf.write("frequency_mhz,signal" + (",sigma" if has_sigma else "") + "\n")
    for i, f in enumerate(rec.grid.frequencies()):
        row = [format(f, ".17g"), format(rec.signal[i], ".17g")]
        if has_sigma:
            row.append(format(rec.sigma[i], ".17g"))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def spectrum_from_csv(text):
    """Inverse of :func:`spectrum_to_csv`."""
    meta = {}
    lines = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = _parse_value(value.strip())
        elif line.strip():
            lines.append(line)
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or reader.fieldnames[:2] != ["frequency_mhz", "signal"]:
        raise DomainError("spectrum CSV must start with header frequency_mhz,signal")
    rows = list(reader)
    freq = np.array([float(r["frequency_mhz"]) for r in rows])
    signal = np.array([float(r["signal"]) for r in rows])
    sigma = None
    if "sigma" in reader.fieldnames:
        sigma = np.array([float(r["sigma"]) for r in rows])
    if "grid_step" in meta:
        grid = FrequencyGrid(float(meta.pop("grid_start")), float(meta.pop("grid_step")),
                             int(meta.pop("grid_count")))
        if grid.count != freq.size:
            raise DomainError("grid_count disagrees with the number of rows")
    else:
        steps = np.diff(freq)
        if freq.size < 2 or not np.allclose(steps, steps[0], rtol=1e-9):
            raise DomainError("frequency column is not a uniform grid")
        grid = FrequencyGrid(freq[0], (freq[-1] - freq[0]) / (freq.size - 1), freq.size)
    return SpectrumRecord(grid, signal, sigma, meta)


def write_spectrum(path, rec):
    with open(path, "w", newline="") as fh:
        fh.write(spectrum_to_csv(rec))


def read_spectrum(path):
    with open(path) as fh:
        return spectrum_from_csv(fh.read())


def normalize_components(components):
    """Rescale weights to sum to one."""
    total = math.fsum(c.weight for c in components)
    return [HyperfineComponent(c.offset, c.weight / total) for c in components]


def load_hyperfine(path):
    """
    Read a ``offset_mhz,weight`` CSV and renormalize the weights.

    Lines starting with ``#`` are comments. The intensity-weighted mean
    offset is not forced to zero; see :func:`multiplet_centroid`.
    """
    with open(path) as fh:
        rows = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(rows)
    if reader.fieldnames != ["offset_mhz", "weight"]:
        raise DomainError("hyperfine CSV header must be offset_mhz,weight")
    comps = [HyperfineComponent(float(r["offset_mhz"]), float(r["weight"])) for r in reader]
    if not comps:
        raise DomainError("hyperfine file has no components")
    return normalize_components(comps)


def save_hyperfine(path, components):
    with open(path, "w", newline="") as fh:
        fh.write("offset_mhz,weight\n")
        for c in components:
            fh.write(f"{c.offset:.17g},{c.weight:.17g}\n")


def multiplet_centroid(components):
    """Intensity-weighted mean offset (MHz)."""
    total = math.fsum(c.weight for c in components)
    return math.fsum(c.weight * c.offset for c in components) / total
