"""Numerical toolkit for rough differential equations driven by fractional
Brownian motion: rough-path lifts, fBm sampling and conditioning, a Davie
solver with Jacobian flow, Hoelder roughness and Norris-type bounds, and
hypoellipticity diagnostics (Hoermander brackets, Malliavin matrices)."""

from .errors import (ConfigError, DomainError, HypothesisViolation, NumericalError,
                     RoughlabError)
from .rough_core import ControlledPath, Grid, Path, RoughPath

__version__ = "0.1.0"

__all__ = ["ConfigError", "ControlledPath", "DomainError", "Grid", "HypothesisViolation",
           "NumericalError", "Path", "RoughPath", "RoughlabError", "__version__"]
