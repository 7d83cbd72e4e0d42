"""Exception hierarchy shared by every ctdose module."""


class CTDoseError(Exception):
    """Base class for all errors raised by ctdose."""


class ParameterError(CTDoseError, ValueError):
    """An argument violates a documented precondition."""


class IngestionError(CTDoseError):
    """A manifest entry or raw payload could not be loaded."""


class DivergenceError(CTDoseError, FloatingPointError):
    """A non-finite value appeared during optimisation."""


class UnreachableTargetError(CTDoseError):
    """The dose search cannot reach the requested quality.

    ``achieved`` holds the PSNR obtained at the upper search bound.
    """

    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = achieved


class ConfigError(ParameterError):
    """An experiment config file is malformed or inconsistent."""
