"""Mean field equilibria of dynamic two-sided matching markets."""

__version__ = "0.1.0"

from .grids import SpaceTimeField, SpatialGrid, TimeGrid, build_grid, build_time_grid
from .income import (
    GeneralizedParetoFit,
    GeneralizedParetoParams,
    ParetoLogNormalFit,
    ParetoLogNormalParams,
    QuantileData,
    calibrate,
)
from .solver import (
    EquilibriumSolver,
    EquilibriumState,
    MarketParams,
    MarketSideParams,
    MarketGrids,
    SolverOptions,
    labor_market_params,
    solve_fixed_point,
)

__all__ = [
    "__version__",
    "SpaceTimeField",
    "SpatialGrid",
    "TimeGrid",
    "build_grid",
    "build_time_grid",
    "GeneralizedParetoFit",
    "GeneralizedParetoParams",
    "ParetoLogNormalFit",
    "ParetoLogNormalParams",
    "QuantileData",
    "calibrate",
    "EquilibriumSolver",
    "EquilibriumState",
    "MarketParams",
    "MarketSideParams",
    "MarketGrids",
    "SolverOptions",
    "labor_market_params",
    "solve_fixed_point",
]
