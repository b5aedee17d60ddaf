"""Market equilibria for EV batteries as mobile storage in a power network.

Two-period transmission-constrained economic dispatch with locational
marginal prices, plus myopic, socially optimal, and Nash-equilibrium storage
participation for commuter, on-demand, and hybrid driver populations.
"""

from .dispatch import (DispatchError, DispatchSolution, DispatchSolver,
                       lmp_spread, solve_dispatch, storage_value_gradient)
from .drivers import (CostDistribution, DriverPopulation, cdf_eval,
                      cdf_inverse, supply_from_threshold)
from .equilibrium import (DeviationReport, EquilibriumResult, solve_concept,
                          solve_myopic_commuter, solve_myopic_hybrid,
                          solve_myopic_ondemand, solve_ne_commuter,
                          solve_ne_hybrid, solve_ne_ondemand,
                          solve_sw_commuter, solve_sw_hybrid,
                          solve_sw_ondemand, verify_equilibrium)
from .network import (CostSpec, NetworkError, PowerNetwork, RouteStorage,
                      UtilitySpec, build_shift_factors, validate_network)
from .oracle import (AtomizedPopulation, best_response_dynamics,
                     brute_force_sw, discretize_population,
                     finite_difference_gradient)
from .scenario import ScenarioError, parse_scenario
from .twobus import TwoBusParams, analytic_lmps, analytic_solutions

__version__ = "0.1.0"

__all__ = [
    "AtomizedPopulation", "CostDistribution", "CostSpec", "DeviationReport",
    "DispatchError", "DispatchSolution", "DispatchSolver",
    "DriverPopulation", "EquilibriumResult", "NetworkError", "PowerNetwork",
    "RouteStorage", "ScenarioError", "TwoBusParams", "UtilitySpec",
    "analytic_lmps", "analytic_solutions", "best_response_dynamics",
    "brute_force_sw", "build_shift_factors", "cdf_eval", "cdf_inverse",
    "discretize_population", "finite_difference_gradient", "lmp_spread",
    "parse_scenario", "solve_concept", "solve_dispatch",
    "solve_myopic_commuter", "solve_myopic_hybrid", "solve_myopic_ondemand",
    "solve_ne_commuter", "solve_ne_hybrid", "solve_ne_ondemand",
    "solve_sw_commuter", "solve_sw_hybrid", "solve_sw_ondemand",
    "storage_value_gradient", "supply_from_threshold", "validate_network",
    "verify_equilibrium",
]
