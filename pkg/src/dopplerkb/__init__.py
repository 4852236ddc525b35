"""Doppler-broadening determination of the Boltzmann constant."""

from .constants import (
    CODATA2010,
    KB_REFERENCE,
    NH3_SAQ63,
    T_TPW,
    LineIdentity,
    PhysicalConstants,
    amu_to_kg,
    boltzmann_from_width,
    doppler_width,
)
from .errors import ConfigurationError, DomainError, DopplerKbError, NumericalError, StageError
from .lineshape import (
    LineShapeParams,
    QuadratureConfig,
    SpeedDependenceLaw,
    eval_gaussian,
    eval_lorentzian,
    eval_profile,
    eval_sdvp,
    eval_voigt,
    faddeeva,
)
from .spectrum import (
    FrequencyGrid,
    HyperfineComponent,
    SpectrumRecord,
    TransmissionParams,
    add_noise,
    apply_modulation,
    synth_multiplet,
    synth_transmission,
)

__version__ = "0.1.0"
