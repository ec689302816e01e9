class CTMDPError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(CTMDPError, ValueError):
    """Inputs are inconsistent with each other (mismatched grids, bad scenario)."""


class DomainError(CTMDPError, ValueError):
    """A numeric argument is outside the domain of the operation."""


class RefusalError(CTMDPError, RuntimeError):
    """A solver declined to run, e.g. failed H2, unstable step, inadmissible policy."""
