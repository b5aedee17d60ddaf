"""Closed-form reference for the two-bus benchmark network.

Bus 1 carries a quadratic-cost generator in both periods, bus 2 a linear-value
load in the peak period, and commuter storage moves along route 1 -> 2. Prices
and the myopic / social-welfare / Nash storage levels all have closed forms
(the welfare level via a scalar monotone fixed point), which anchors the
generic solvers in the regression tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drivers import CostDistribution, DriverPopulation
from .network import CostSpec, PowerNetwork, UtilitySpec, build_shift_factors


@dataclass(frozen=True)
class TwoBusParams:
    """Generator cost a*g^2 + b*g at bus 1, load value c*d at bus 2 (peak),
    commuter degradation cost kappa, inconvenience CDF on route 1 -> 2."""

    a: float
    b: float
    c: float
    kappa: float
    F: CostDistribution

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("quadratic cost coefficient a must be positive")
        if self.c <= self.b or self.b < 0:
            raise ValueError("need c > b >= 0 for a profitable peak load")
        if self.kappa < 0:
            raise ValueError("degradation cost must be nonnegative")


def analytic_lmps(params: TwoBusParams, S12: float) -> tuple[float, float]:
    """Exact nodal prices (origin off-peak, destination peak) at capacity S12.

    The off-peak price rises with the storage being charged until the spread
    closes at S12 = (c - b) / 2a; the peak price stays pinned at the load's
    marginal value.
    """
    if S12 < 0:
        raise ValueError("storage capacity must be nonnegative")
    lam1 = 2.0 * params.a * min(S12, (params.c - params.b) / (2.0 * params.a)) + params.b
    return lam1, params.c


def analytic_solutions(params: TwoBusParams) -> tuple[float, float, float]:
    """Myopic, social-welfare and Nash storage levels on route 1 -> 2.

    The myopic level prices participation at zero storage. The welfare level
    solves S = F(c - 2aS - b - kappa), a monotone scalar fixed point found by
    bisection (the left side increases, the right side does not); the Nash
    level coincides with it.
    """
    a, b, c, kappa, F = params.a, params.b, params.c, params.kappa, params.F
    s_myop = F.eval(c - b - kappa)

    def gap(s: float) -> float:
        return s - F.eval(c - 2.0 * a * s - b - kappa)

    lo, hi = 0.0, F.finite_mass
    if gap(lo) >= 0.0:
        s_sw = 0.0
    elif gap(hi) <= 0.0:
        s_sw = hi
    else:
        for _ in range(128):
            mid = 0.5 * (lo + hi)
            if gap(mid) > 0.0:
                hi = mid
            else:
                lo = mid
        s_sw = 0.5 * (lo + hi)
    return float(s_myop), float(s_sw), float(s_sw)


def make_network(params: TwoBusParams, line_limit: float = 50.0) -> PowerNetwork:
    """Two-bus network matching the closed forms; both flow directions monitored."""
    H_fwd = build_shift_factors([(0, 1, 1.0)], n=2, slack_bus=0)
    H = np.vstack([H_fwd, -H_fwd])
    f_bar = np.array([line_limit, line_limit])
    return PowerNetwork.from_specs(
        n=2, H=H, f_bar=f_bar,
        costs={(0, 0): CostSpec(a=params.a, b=params.b),
               (0, 1): CostSpec(a=params.a, b=params.b)},
        utilities={(1, 1): UtilitySpec(c=params.c)},
        name="twobus",
    )


def make_population(params: TwoBusParams) -> DriverPopulation:
    """Commuter-only population on route 1 -> 2."""
    return DriverPopulation(
        n=2,
        commuter={(0, 1): params.F},
        commuter_kappa=params.kappa,
    )


REFERENCE = TwoBusParams(a=1.0, b=10.0, c=30.0, kappa=2.0,
                         F=CostDistribution.uniform(0.0, 20.0))
