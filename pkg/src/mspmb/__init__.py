"""Multisensor Poisson multi-Bernoulli filtering for joint vehicle and feature tracking."""

__version__ = "0.1.0"

from .errors import AssociationTooLarge, ContractError, DegeneracyError
from .filter import FilterConfig, Models, initial_state, step_sequential
from .gaussian import GaussianDensity, GaussianMixture
from .rfs import BernoulliComponent, PmbState, PoissonIntensity, VehicleBelief
from .scan import ScanRecord

__all__ = [
    "AssociationTooLarge",
    "BernoulliComponent",
    "ContractError",
    "DegeneracyError",
    "FilterConfig",
    "GaussianDensity",
    "GaussianMixture",
    "Models",
    "PmbState",
    "PoissonIntensity",
    "ScanRecord",
    "VehicleBelief",
    "initial_state",
    "step_sequential",
]
