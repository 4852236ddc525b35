"""
Uncertainty budget, width corrections and the end-to-end k_B pipeline.

k_B scales with the square of the Doppler width and inversely with the
temperature, so a relative error ``e`` on the width becomes ``2 e`` on
k_B while a relative error on T passes through unchanged.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources

from .constants import NH3_SAQ63, boltzmann_from_width
from .errors import ConfigurationError, DomainError, NumericalError, StageError
from .fitting import _map, fit_spectrum, initial_guess, width_vs_absorbance
from .thermometry import temperature_from_bridge, temperature_uncertainty

TYPE_A = "typeA"
TYPE_B = "typeB"
_KINDS = (TYPE_A, TYPE_B)

#: Name of the budget row fed by the thermometry stage.
T_MEASUREMENT = "T measurement"

#: Largest correction magnitude accepted as plausible, ppm.
MAX_CORRECTION_PPM = 100.0


@dataclass(frozen=True)
class BudgetEntry:
    """One row of the k_B budget (relative standard uncertainty, ppm)."""

    name: str
    rel_u_ppm: float
    kind: str = TYPE_B
    comment: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.rel_u_ppm) and self.rel_u_ppm >= 0):
            raise DomainError(f"budget entry {self.name!r}: rel_u_ppm must be >= 0")
        if self.kind not in _KINDS:
            raise DomainError(f"budget entry {self.name!r}: kind must be one of {_KINDS}")


@dataclass(frozen=True)
class CorrectionEntry:
    """
    Known relative bias of the fitted Doppler width.

    ``value_ppm`` is the overestimation of the width (positive means the
    fit reads too wide); ``u_ppm`` its standard uncertainty.
    """

    name: str
    value_ppm: float
    u_ppm: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.u_ppm) and self.u_ppm >= 0):
            raise DomainError(f"correction {self.name!r}: u_ppm must be >= 0")
        if not abs(self.value_ppm) < MAX_CORRECTION_PPM:
            raise DomainError(f"correction {self.name!r}: |value_ppm| must be < {MAX_CORRECTION_PPM}")


#: Laser-modulation broadening of the width.
MODULATION_CORRECTION = CorrectionEntry("Laser beam modulation", 0.23, 0.02)
#: Unresolved hyperfine structure.
HYPERFINE_CORRECTION = CorrectionEntry("Hyperfine Structure", 4.356, 0.013)


def apply_corrections(raw_width, corrections):
    """
    Remove known biases from a fitted width.

    Returns
    -------
    corrected : float
        ``raw_width / prod(1 + value_ppm * 1e-6)``.
    entries : list of BudgetEntry
        One type-B entry per correction with ``2 * u_ppm`` on k_B.
    """
    factor = 1.0
    entries = []
    for c in corrections:
        factor *= 1.0 + c.value_ppm * 1e-6
        entries.append(BudgetEntry(c.name, 2.0 * c.u_ppm, TYPE_B,
                                   f"correction {c.value_ppm:+g}({c.u_ppm:g}) ppm on the width"))
    return raw_width / factor, entries


def combine_rss(entries):
    """Root sum of squares of the ``rel_u_ppm`` values."""
    return math.sqrt(math.fsum(e.rel_u_ppm ** 2 for e in entries))


# -- files ----------------------------------------------------------------------

def budget_from_json(text):
    """Parse a budget file: a JSON list of ``{name, rel_u_ppm, kind, comment}``."""
    data = json.loads(text)
    if not isinstance(data, list):
        raise ConfigurationError("budget file must be a JSON list")
    try:
        return [BudgetEntry(d["name"], float(d["rel_u_ppm"]), d.get("kind", TYPE_B), d.get("comment", ""))
                for d in data]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed budget entry: {exc}") from exc


def budget_to_json(entries):
    return json.dumps([asdict(e) for e in entries], indent=2)


def load_budget(path):
    with open(path) as fh:
        return budget_from_json(fh.read())


def default_budget():
    """Declared facility entries shipped with the package (``data/facility_budget.json``)."""
    text = resources.files("dopplerkb").joinpath("data/facility_budget.json").read_text()
    return budget_from_json(text)


def corrections_from_json(text):
    data = json.loads(text)
    try:
        return [CorrectionEntry(d["name"], float(d["value_ppm"]), float(d.get("u_ppm", 0.0))) for d in data]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed correction entry: {exc}") from exc


def merge_entries(declared, computed):
    """Declared entries with same-name ones replaced by ``computed``; new names appended."""
    by_name = {e.name: e for e in computed}
    merged = [by_name.pop(e.name, e) for e in declared]
    return merged + [e for e in computed if e.name in by_name]


def budget_table(entries, total=None, type_a=None):
    """Fixed-width text table: component, ppm on k_B, type, comment."""
    width = max([len(e.name) for e in entries] + [len("Combined standard uncertainty")])
    lines = [f"{'Component':<{width}}  {'u(kB)/ppm':>10}  {'type':<5}  comment",
             "-" * (width + 32)]
    for e in entries:
        lines.append(f"{e.name:<{width}}  {e.rel_u_ppm:>10.4g}  {e.kind:<5}  {e.comment}")
    lines.append("-" * (width + 32))
    total = combine_rss(entries) if total is None else total
    lines.append(f"{'Combined standard uncertainty':<{width}}  {total:>10.2g}  {'':<5}  root sum of squares")
    if type_a is not None:
        lines.append(f"{'Statistical (type A)':<{width}}  {type_a:>10.4g}  {TYPE_A:<5}  width regression")
    return "\n".join(lines) + "\n"


# -- pipeline ----------------------------------------------------------------------

@dataclass
class KbReport:
    """Result of :func:`run_kb_pipeline`."""

    kb_value: float
    corrected_width: float
    temperature: float
    corrections: list
    budget: list
    combined_ppm: float
    raw_width: float = float("nan")
    temperature_u: float = float("nan")
    type_a_ppm: float = float("nan")
    width_slope: float = float("nan")
    n_spectra: int = 0
    n_failed: int = 0
    fit_status: list = field(default_factory=list)

    def to_dict(self):
        return {
            "kb_value": self.kb_value,
            "corrected_width_mhz": self.corrected_width,
            "raw_width_mhz": self.raw_width,
            "width_slope": self.width_slope,
            "temperature_k": self.temperature,
            "temperature_u_k": self.temperature_u,
            "combined_ppm": self.combined_ppm,
            "type_a_ppm": self.type_a_ppm,
            "corrections": [asdict(c) for c in self.corrections],
            "budget": [asdict(e) for e in self.budget],
            "n_spectra": self.n_spectra,
            "n_failed": self.n_failed,
            "fit_status": self.fit_status,
        }

    def table(self):
        return budget_table(self.budget, self.combined_ppm, self.type_a_ppm)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # any failure is reported against its stage
        raise StageError(name, exc) from exc


def _fit_all(spectra, cfg, temperature, line, threads):
    def one(rec):
        fit_cfg = cfg
        if cfg.initial is None:
            fit_cfg = cfg.with_initial(initial_guess(rec, temperature, line))
        try:
            return fit_spectrum(rec, fit_cfg)
        except (NumericalError, DomainError, ConfigurationError):
            return None

    fits = _map(one, spectra, threads)
    good = [f for f in fits if f is not None and f.converged]
    status = [f.status if f is not None else "error" for f in fits]
    if len(spectra) - len(good) > 0.1 * len(spectra):
        raise NumericalError(f"{len(spectra) - len(good)} of {len(spectra)} fits failed", {"status": status})
    return good, status


def run_kb_pipeline(spectra, bridge, bridge_u, cfg, corrections=(), declared_entries=None,
                    line=NH3_SAQ63, threads=1):
    """
    From spectra and a bridge reading to k_B with its budget.

    Stages, each tagged in a :class:`StageError` on failure: ``fit``
    (every spectrum, starting from ``cfg.initial``, or from
    :func:`initial_guess` when that is None), ``aggregate``
    (zero-absorbance width), ``corrections``, ``thermometry``,
    ``boltzmann`` and ``budget``.

    The budget is the declared list (package default when None) in which
    each correction's entry and the thermometry entry (``T measurement``,
    computed as ``u(T)/T``) replace declared rows of the same name. The
    regression's own statistical uncertainty, doubled for k_B, is reported
    as ``type_a_ppm`` and kept out of ``combined_ppm``.
    """
    if len(spectra) < 3:
        raise StageError("fit", DomainError("need at least 3 spectra"))
    temperature = _stage("thermometry", temperature_from_bridge, bridge)
    u_t = _stage("thermometry", temperature_uncertainty, bridge, bridge_u)
    fits, status = _stage("fit", _fit_all, spectra, cfg, temperature, line, threads)
    reg = _stage("aggregate", width_vs_absorbance, fits)
    corrected, corr_entries = _stage("corrections", apply_corrections, reg.intercept, list(corrections))
    kb = _stage("boltzmann", boltzmann_from_width, corrected, temperature, line)

    def assemble():
        declared = default_budget() if declared_entries is None else list(declared_entries)
        t_entry = BudgetEntry(T_MEASUREMENT, 1e6 * u_t / temperature, TYPE_B, "bridge reading propagation")
        return merge_entries(declared, corr_entries + [t_entry])

    budget = _stage("budget", assemble)
    return KbReport(
        kb_value=kb,
        corrected_width=corrected,
        temperature=temperature,
        corrections=list(corrections),
        budget=budget,
        combined_ppm=combine_rss(budget),
        raw_width=reg.intercept,
        temperature_u=u_t,
        type_a_ppm=2e6 * reg.intercept_se / reg.intercept,
        width_slope=reg.slope,
        n_spectra=len(spectra),
        n_failed=len(spectra) - len(fits),
        fit_status=status,
    )
