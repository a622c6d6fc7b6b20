"""Functional zoning of biodiversity profiles.

Per-cell species counts become Hill-number profiles, profiles are smoothed
into a monotone functional form, and the resulting coefficient vectors are
clustered by a Gaussian mixture whose mixing weights vary smoothly over
space.
"""

from .census import AbundanceGrid, GridSpec, StemRecord, TreeRecord
from .diversity import QGrid, gini_simpson, hill_number, hill_profile, shannon_entropy
from .errors import BiodivError
from .pfc import FitConfig, FittedModel, ModelParams, fit_em
from .selection import ScoreRecord, bic, complexity, grid_search, icl
from .smoothing import BasisSystem, SmoothedProfile, fit_profile
from .spatial_basis import SpatialBasis, spatial_basis_for_sites
from .synth import SyntheticScenario, adjusted_rand_index

__version__ = "0.1.0"

__all__ = [
    "AbundanceGrid",
    "BasisSystem",
    "BiodivError",
    "FitConfig",
    "FittedModel",
    "GridSpec",
    "ModelParams",
    "QGrid",
    "ScoreRecord",
    "SmoothedProfile",
    "SpatialBasis",
    "StemRecord",
    "SyntheticScenario",
    "TreeRecord",
    "adjusted_rand_index",
    "bic",
    "complexity",
    "fit_em",
    "fit_profile",
    "gini_simpson",
    "grid_search",
    "hill_number",
    "hill_profile",
    "icl",
    "shannon_entropy",
    "spatial_basis_for_sites",
]
