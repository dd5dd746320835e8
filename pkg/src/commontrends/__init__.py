"""Structural decomposition and common-trend analysis of gridded monthly series."""
from ._accel import BACKEND
from .errors import (CommonTrendsError, ConfigError, ContractError, DataError,
                     DegeneracyError, NumericalError)
from .ssm import GaussianStateSpace, ObservationSeries, filter, loglik, simulate, smooth
from .structural import (DecompositionResult, OptimizerSettings, StructuralParams,
                         StructuralSpec, assemble, decompose, fit, partial_residual)
from .subspace import (CommonTrendsResult, HankelSpec, RealizationModel, SeriesPanel,
                       build_hankel, correlation_map, extract_trends, identify, loading_map,
                       realize, reconstruct, select_rank, solve_riccati)

__version__ = "0.1.0"
