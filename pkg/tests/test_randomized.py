"""Seeded random instances: the welfare/Nash agreement must not be a corpus
artifact. Smooth populations and strictly convex costs keep fixed points
well posed."""

import numpy as np
import pytest

from evmarket import equilibrium as eq
from evmarket.drivers import CostDistribution, DriverPopulation
from evmarket.network import CostSpec, PowerNetwork, UtilitySpec, build_shift_factors

TOPOLOGIES = {
    2: [(0, 1)],
    3: [(0, 1), (1, 2), (0, 2)],
}


def random_instance(rng):
    n = int(rng.integers(2, 4))
    edges = [(i, j, float(rng.uniform(0.5, 2.0))) for (i, j) in TOPOLOGIES[n]]
    H_fwd = build_shift_factors(edges, n=n, slack_bus=0)
    H = np.vstack([H_fwd, -H_fwd])
    limits = rng.uniform(4.0, 12.0, len(edges))
    f_bar = np.concatenate([limits, limits])

    costs = {}
    utilities = {}
    for i in range(n):
        if i == 0 or rng.random() < 0.6:
            a = rng.uniform(0.3, 1.5)
            b = rng.uniform(3.0, 12.0)
            for t in range(2):
                costs[(i, t)] = CostSpec(a=a, b=b * (1.0 + 0.3 * t))
        if rng.random() < 0.8:
            c1 = rng.uniform(6.0, 14.0)
            c2 = rng.uniform(18.0, 32.0)
            utilities[(i, 0)] = UtilitySpec(c=c1, q=rng.uniform(0.3, 1.0))
            utilities[(i, 1)] = UtilitySpec(c=c2, q=rng.uniform(0.3, 1.0))
    net = PowerNetwork.from_specs(n=n, H=H, f_bar=f_bar, costs=costs,
                                  utilities=utilities)

    commuter = {}
    if rng.random() < 0.8:
        for _ in range(int(rng.integers(1, 4))):
            i, j = int(rng.integers(n)), int(rng.integers(n))
            hi = rng.uniform(5.0, 20.0)
            commuter[(i, j)] = CostDistribution.uniform(
                rng.uniform(0.0, 2.0), hi, mass=rng.uniform(0.4, 1.0))
    ondemand = None
    kappa_od = None
    if rng.random() < 0.6 or not commuter:
        ondemand = CostDistribution.uniform(0.0, rng.uniform(6.0, 25.0),
                                            mass=rng.uniform(0.4, 1.0))
        kappa_od = rng.uniform(0.3, 4.0, (n, n))
    pop = DriverPopulation(n=n, commuter=commuter,
                           commuter_kappa=rng.uniform(0.0, 3.0),
                           ondemand=ondemand, ondemand_kappa=kappa_od)
    return net, pop


@pytest.mark.parametrize("seed", range(8))
def test_nash_supports_welfare_on_random_instances(seed):
    rng = np.random.default_rng(1000 + seed)
    net, pop = random_instance(rng)
    kind = ("hybrid" if pop.has_commuters and pop.has_ondemand
            else "ondemand" if pop.has_ondemand else "commuter")
    sw = eq.solve_concept(net, pop, "sw", kind)
    ne = eq.solve_concept(net, pop, "ne", kind, verify=False)
    assert sw.telemetry.converged, f"seed {seed}: welfare solver stalled"
    assert ne.telemetry.converged, f"seed {seed}: fixed point stalled"

    for (i, j), dist in pop.commuter.items():
        if dist.finite_mass > 0:
            assert abs(sw.thresholds_fix[i, j] - ne.thresholds_fix[i, j]) <= 1e-5
    if pop.has_ondemand:
        assert abs(sw.threshold_flex - ne.threshold_flex) <= 1e-5
    assert abs(sw.J - ne.J) <= 1e-6 * (1.0 + abs(sw.J))

    myop = eq.solve_concept(net, pop, "myopic", kind)
    assert myop.S.total() >= ne.S.total() - 1e-7
