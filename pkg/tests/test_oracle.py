import numpy as np
import pytest

from evmarket import equilibrium as eq
from evmarket.drivers import CostDistribution, DriverPopulation
from evmarket.oracle import (best_response_dynamics, brute_force_sw,
                             compare_gradients, discretize_population,
                             finite_difference_gradient)
from evmarket.twobus import REFERENCE, TwoBusParams, make_network, make_population

S_SW = 9.0 / 11.0


class TestDiscretizePopulation:
    def test_uniform_quantile_midpoints(self, twobus_pop):
        atoms = discretize_population(twobus_pop, 4)
        thetas = [a.theta for a in atoms.atoms]
        np.testing.assert_allclose(thetas, [2.5, 7.5, 12.5, 17.5])
        assert all(a.mass == pytest.approx(0.25) for a in atoms.atoms)
        assert atoms.total_mass == pytest.approx(1.0)

    def test_single_atom_at_median(self, twobus_pop):
        atoms = discretize_population(twobus_pop, 1)
        assert len(atoms.atoms) == 1
        assert atoms.atoms[0].theta == pytest.approx(10.0)

    def test_partial_mass_quantiles(self):
        pop = DriverPopulation(
            n=2, commuter={(0, 1): CostDistribution.uniform(0, 20, mass=0.5)},
            commuter_kappa=1.0)
        atoms = discretize_population(pop, 2)
        thetas = sorted(a.theta for a in atoms.atoms)
        # quantiles 0.125 and 0.375 of F(theta) = theta / 40
        np.testing.assert_allclose(thetas, [5.0, 15.0])
        assert all(a.mass == pytest.approx(0.25) for a in atoms.atoms)

    def test_mixed_classes(self, corpus):
        pop = corpus["twobus_hybrid"].population
        atoms = discretize_population(pop, 10)
        classes = {a.driver_class for a in atoms.atoms}
        assert classes == {"commuter", "ondemand"}
        assert len(atoms.atoms) == 20


class TestBestResponseDynamics:
    def test_two_bus_converges_to_continuum(self, twobus_net, twobus_pop):
        atoms = discretize_population(twobus_pop, 200)
        res = best_response_dynamics(twobus_net, atoms)
        assert res.converged
        assert abs(res.S.total() - S_SW) <= 2.0 / 200

    def test_unprofitable_population_stays_out(self, twobus_net):
        pop = DriverPopulation(
            n=2, commuter={(0, 1): CostDistribution.uniform(25.0, 40.0)},
            commuter_kappa=2.0)
        atoms = discretize_population(pop, 20)
        res = best_response_dynamics(twobus_net, atoms)
        assert res.converged and res.rounds == 1
        assert res.S.total() == 0.0

    def test_single_atom_post_entry_pricing(self):
        # one atom of full unit mass: entering moves the price before the
        # payoff is evaluated
        base = dict(a=1.0, b=10.0, c=30.0)
        for theta, expect_in in ((15.0, True), (16.5, False)):
            params = TwoBusParams(kappa=2.0, F=CostDistribution.point(theta), **base)
            net = make_network(params)
            atoms = discretize_population(make_population(params), 1)
            res = best_response_dynamics(net, atoms)
            # post-entry spread: c - 2a*mass - b = 18 at mass 1; payoff 18-2-theta
            assert (res.assignment[0] is not None) == expect_in

    def test_hybrid_matches_continuum(self, corpus):
        scn = corpus["twobus_hybrid"]
        ne = eq.solve_ne_hybrid(scn.network, scn.population, verify=False)
        atoms = discretize_population(scn.population, 200)
        res = best_response_dynamics(scn.network, atoms)
        assert res.converged
        assert abs(res.S.total() - ne.S.total()) <= 2 * 2.0 / 200

    def test_equilibrium_certificate(self, twobus_net, twobus_pop):
        """No atom retains a profitable deviation at termination."""
        atoms = discretize_population(twobus_pop, 50)
        res = best_response_dynamics(twobus_net, atoms)
        from evmarket.dispatch import solve_dispatch
        S = res.S.values
        for k, atom in enumerate(atoms.atoms):
            current = res.assignment[k]
            for act in (None, atom.route):
                S_alt = S.copy()
                if current is not None:
                    S_alt[current[0] * 2 + current[1]] -= atom.mass
                if act is not None:
                    S_alt[act[0] * 2 + act[1]] += atom.mass
                sol = solve_dispatch(twobus_net, np.maximum(S_alt, 0.0))
                pay_alt = 0.0
                if act is not None:
                    spread = sol.lambda2[act[1]] - sol.lambda1[act[0]]
                    pay_alt = spread - twobus_pop.commuter_kappa - atom.theta
                sol_cur = solve_dispatch(twobus_net, S)
                pay_cur = 0.0
                if current is not None:
                    spread = sol_cur.lambda2[current[1]] - sol_cur.lambda1[current[0]]
                    pay_cur = spread - twobus_pop.commuter_kappa - atom.theta
                assert pay_alt <= pay_cur + 1e-9


class TestBruteForceSw:
    def test_exhaustive_optimum_is_theta_prefix(self, twobus_net, twobus_pop):
        atoms = discretize_population(twobus_pop, 8)
        res = brute_force_sw(twobus_net, atoms)
        assert res.mode == "exhaustive"
        participating = res.participating()
        thetas = [a.theta for a in atoms.atoms]
        order = np.argsort(thetas)
        assert participating == sorted(order[:len(participating)].tolist())

    def test_huge_kappa_empty_assignment(self, twobus_net):
        pop = DriverPopulation(n=2, commuter={(0, 1): REFERENCE.F},
                               commuter_kappa=500.0)
        atoms = discretize_population(pop, 6)
        res = brute_force_sw(twobus_net, atoms)
        assert res.participating() == []

    def test_ondemand_exhaustive_matches_greedy(self, corpus):
        scn = corpus["twobus_ondemand"]
        atoms = discretize_population(scn.population.ondemand_only(), 6)
        exhaustive = brute_force_sw(scn.network, atoms)
        greedy = brute_force_sw(scn.network, atoms, exhaustive_limit=1)
        assert exhaustive.mode == "exhaustive" and greedy.mode == "greedy"
        assert greedy.locally_optimal
        assert greedy.social_cost == pytest.approx(exhaustive.social_cost, abs=1e-6)

    def test_matches_continuum_welfare(self, twobus_net, twobus_pop):
        atoms = discretize_population(twobus_pop, 10)
        res = brute_force_sw(twobus_net, atoms)
        # continuum optimum 9/11 quantized to tenths
        assert abs(sum(a.mass for a, act in zip(atoms.atoms, res.assignment)
                       if act is not None) - S_SW) <= 1.0 / 10


class TestFiniteDifferenceGradient:
    def test_reference_point(self, twobus_net):
        S = np.array([0.0, 0.5, 0.0, 0.0])
        grad = finite_difference_gradient(twobus_net, S)
        # spread at S12 = 0.5 is 19; forward differences at the zero boundary
        assert grad[1] == pytest.approx(-19.0, abs=1e-3)

    def test_zero_spread_zero_gradient(self):
        params = TwoBusParams(a=1.0, b=10.0, c=30.0, kappa=2.0, F=REFERENCE.F)
        net = make_network(params)
        S = np.array([0.0, 12.0, 0.0, 0.0])  # beyond (c-b)/2a: spread closed
        grad = finite_difference_gradient(net, S)
        assert grad[1] == pytest.approx(0.0, abs=1e-6)

    def test_matches_analytic_on_random_scenarios(self, corpus):
        net = corpus["triangle_commuter"].network
        rng = np.random.default_rng(17)
        checked = 0
        for _ in range(10):
            S = rng.uniform(0.05, 0.6, net.n_routes)
            comp = compare_gradients(net, S, h=1e-4)
            if not comp.kink_free.all():
                continue
            checked += 1
            np.testing.assert_allclose(comp.analytic, comp.central, atol=1e-3)
            if checked >= 5:
                break
        assert checked >= 5

    def test_invalid_step_rejected(self, twobus_net):
        with pytest.raises(ValueError):
            finite_difference_gradient(twobus_net, np.zeros(4), h=0.0)


class TestOracleConvergenceRate:
    def test_error_within_inverse_n(self, twobus_net, twobus_pop):
        for count in (50, 100, 200):
            atoms = discretize_population(twobus_pop, count)
            res = best_response_dynamics(twobus_net, atoms)
            assert res.converged
            assert abs(res.S.total() - S_SW) <= 3.0 / count


class TestThresholdStructure:
    """Participation in oracle outputs is always a lowest-cost prefix."""

    @staticmethod
    def assert_prefix_per_group(atoms, assignment):
        groups: dict = {}
        for atom, act in zip(atoms.atoms, assignment):
            key = (atom.driver_class, atom.route)
            groups.setdefault(key, []).append((atom.theta, act is not None))
        for key, members in groups.items():
            members.sort()
            flags = [m[1] for m in members]
            # once a driver stays out, no costlier driver participates
            first_out = flags.index(False) if False in flags else len(flags)
            assert not any(flags[first_out:]), key

    def test_best_response_assignments(self, corpus):
        for name in ("twobus", "twobus_hybrid", "twobus_ondemand"):
            scn = corpus[name]
            atoms = discretize_population(scn.population, 40)
            res = best_response_dynamics(scn.network, atoms)
            assert res.converged, name
            self.assert_prefix_per_group(atoms, res.assignment)

    def test_exhaustive_optimum(self, corpus):
        scn = corpus["twobus_hybrid"]
        atoms = discretize_population(scn.population, 4)
        res = brute_force_sw(scn.network, atoms, exhaustive_limit=100_000)
        assert res.mode == "exhaustive"
        self.assert_prefix_per_group(atoms, res.assignment)


class TestHybridBruteForce:
    def test_exhaustive_matches_continuum_welfare(self, corpus):
        scn = corpus["twobus_hybrid"]
        count = 4
        atoms = discretize_population(scn.population, count)
        bf = brute_force_sw(scn.network, atoms, exhaustive_limit=100_000)
        sw = eq.solve_sw_hybrid(scn.network, scn.population)
        agg = np.zeros(scn.network.n_routes)
        for atom, act in zip(atoms.atoms, bf.assignment):
            if act is not None:
                agg[act[0] * scn.network.n + act[1]] += atom.mass
        granularity = (scn.population.commuter[(0, 1)].finite_mass
                       + scn.population.ondemand.finite_mass) / count
        assert abs(agg.sum() - sw.S.total()) <= granularity
