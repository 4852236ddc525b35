"""Exception hierarchy shared by all modules."""


class DopplerKbError(Exception):
    """Base class for package errors."""


class DomainError(DopplerKbError, ValueError):
    """An input lies outside the domain of the operation."""


class ConfigurationError(DopplerKbError, ValueError):
    """A parameter set or configuration is inconsistent."""


class NumericalError(DopplerKbError, RuntimeError):
    """A numerical procedure failed to reach its tolerance.

    Parameters
    ----------
    message : str
        Human readable description.
    diagnostics : dict, optional
        Whatever the failing routine knows about the failure (last
        estimates, node counts, ...).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class StageError(DopplerKbError):
    """Failure inside one stage of the k_B pipeline.

    The ``stage`` attribute names the stage (``fit``, ``aggregate``,
    ``corrections``, ``thermometry``, ``boltzmann``, ``budget``) and
    ``cause`` holds the original exception.
    """

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
