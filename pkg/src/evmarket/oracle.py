"""Brute-force cross-checks for the continuum solvers.

The continuum of drivers is discretized into equal-mass atoms at quantile
midpoints. On the atoms we can run best-response dynamics to a finite-game
equilibrium, search the social optimum exhaustively (or greedily with a local
exchange certificate), and difference the dispatch cost for gradients. None of
this shares algorithmic machinery with the continuum solvers beyond the
dispatch itself.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dispatch import get_solver
from .drivers import DriverPopulation
from .network import PowerNetwork, RouteStorage


@dataclass(frozen=True)
class Atom:
    theta: float
    mass: float
    driver_class: str               # "commuter" | "ondemand"
    route: tuple[int, int] | None   # fixed route for commuters, None otherwise


@dataclass(frozen=True, eq=False)
class AtomizedPopulation:
    n: int
    count_per_class: int
    atoms: tuple[Atom, ...]
    population: DriverPopulation

    @property
    def total_mass(self) -> float:
        return sum(a.mass for a in self.atoms)


def discretize_population(pop: DriverPopulation, count: int) -> AtomizedPopulation:
    """Equal-mass atoms at quantile midpoints, per commuter route and for the
    on-demand pool; aggregate atom CDF converges to the source at rate O(1/count)."""
    if count < 1:
        raise ValueError("need at least one atom per class")
    atoms: list[Atom] = []
    for (i, j) in sorted(pop.commuter):
        dist = pop.commuter[(i, j)]
        if dist.finite_mass <= 0:
            continue
        mass = dist.finite_mass / count
        for theta in dist.quantile_midpoints(count):
            atoms.append(Atom(theta=float(theta), mass=mass,
                              driver_class="commuter", route=(i, j)))
    if pop.has_ondemand:
        mass = pop.ondemand.finite_mass / count
        for theta in pop.ondemand.quantile_midpoints(count):
            atoms.append(Atom(theta=float(theta), mass=mass,
                              driver_class="ondemand", route=None))
    return AtomizedPopulation(n=pop.n, count_per_class=count,
                              atoms=tuple(atoms), population=pop)


class _CachedDispatch:
    """Dispatch memoized on the participation-count lattice.

    Atom sweeps revisit the same aggregate profiles constantly; within one
    oracle run all atoms of a class share a mass, so the integer count vector
    identifies the profile exactly.
    """

    def __init__(self, net: PowerNetwork):
        self.net = net
        self.solver = get_solver(net)
        self._cache: dict[tuple, object] = {}
        self.misses = 0

    def solve_counts(self, key: tuple, S: np.ndarray):
        sol = self._cache.get(key)
        if sol is None:
            sol = self.solver.solve(S)
            self._cache[key] = sol
            self.misses += 1
        return sol


def _assignment_profile(atomized: AtomizedPopulation, assignment) -> tuple[tuple, np.ndarray]:
    """Count key and aggregate storage vector for an assignment (route or None
    per atom)."""
    n = atomized.n
    counts = [0] * (2 * n * n)  # commuter block then on-demand block
    S = np.zeros(n * n)
    for atom, act in zip(atomized.atoms, assignment):
        if act is None:
            continue
        r = act[0] * n + act[1]
        block = 0 if atom.driver_class == "commuter" else 1
        counts[block * n * n + r] += 1
        S[r] += atom.mass
    return tuple(counts), S


def _atom_cost(atomized: AtomizedPopulation, atom: Atom, act) -> float:
    """Participation cost contribution of one atom under action ``act``."""
    if act is None:
        return 0.0
    pop = atomized.population
    if atom.driver_class == "commuter":
        return atom.mass * (atom.theta + pop.commuter_kappa)
    return atom.mass * (atom.theta + float(pop.ondemand_kappa[act[0], act[1]]))


def _atom_actions(atomized: AtomizedPopulation, atom: Atom) -> list:
    if atom.driver_class == "commuter":
        return [None, atom.route]
    n = atomized.n
    return [None] + [(i, j) for i in range(n) for j in range(n)]


def _sweep_order(atomized: AtomizedPopulation) -> list[int]:
    """Ascending inconvenience cost; ties by class (commuters first) then route."""
    def key(idx: int):
        a = atomized.atoms[idx]
        class_rank = 0 if a.driver_class == "commuter" else 1
        return (a.theta, class_rank, a.route if a.route is not None else (-1, -1))
    return sorted(range(len(atomized.atoms)), key=key)


@dataclass
class BestResponseResult:
    assignment: tuple
    S: RouteStorage
    rounds: int
    converged: bool
    dispatch_solves: int

    def aggregate_by_class(self, atomized: AtomizedPopulation) -> tuple[np.ndarray, np.ndarray]:
        n = atomized.n
        fix = np.zeros((n, n))
        flex = np.zeros((n, n))
        for atom, act in zip(atomized.atoms, self.assignment):
            if act is None:
                continue
            target = fix if atom.driver_class == "commuter" else flex
            target[act[0], act[1]] += atom.mass
        return fix, flex


def best_response_dynamics(
    net: PowerNetwork,
    atomized: AtomizedPopulation,
    max_rounds: int | None = None,
) -> BestResponseResult:
    """Round-robin best responses until no atom switches.

    Each atom evaluates every action at the aggregate that includes its own
    contribution under that action (post-entry prices), so a no-switch round
    certifies a finite-game equilibrium up to dispatch tolerance. Ties keep
    the current action, then prefer abstention, then the lexicographically
    smallest route.
    """
    atoms = atomized.atoms
    if max_rounds is None:
        max_rounds = 100 * max(len(atoms), 1)
    cache = _CachedDispatch(net)
    pop = atomized.population
    n = atomized.n
    assignment: list = [None] * len(atoms)
    order = _sweep_order(atomized)

    rounds = 0
    converged = False
    while rounds < max_rounds:
        rounds += 1
        switched = False
        for idx in order:
            atom = atoms[idx]
            current = assignment[idx]
            best_act, best_pay = None, 0.0  # abstention payoff
            for act in _atom_actions(atomized, atom):
                if act is None:
                    pay = 0.0
                else:
                    assignment[idx] = act
                    key, S = _assignment_profile(atomized, assignment)
                    sol = cache.solve_counts(key, S)
                    spread = float(sol.lambda2[act[1]] - sol.lambda1[act[0]])
                    if atom.driver_class == "commuter":
                        pay = spread - pop.commuter_kappa - atom.theta
                    else:
                        pay = spread - float(pop.ondemand_kappa[act[0], act[1]]) - atom.theta
                if pay > best_pay + 1e-12:
                    best_act, best_pay = act, pay
            assignment[idx] = current
            # keep the current action unless strictly beaten
            if current is not None or best_act is not None:
                cur_pay = _current_payoff(atomized, cache, assignment, idx)
                if best_pay > cur_pay + 1e-12 and best_act != current:
                    assignment[idx] = best_act
                    switched = True
        if not switched:
            converged = True
            break

    _, S = _assignment_profile(atomized, assignment)
    return BestResponseResult(
        assignment=tuple(assignment),
        S=RouteStorage(n=n, values=S),
        rounds=rounds,
        converged=converged,
        dispatch_solves=cache.misses,
    )


def _current_payoff(atomized, cache, assignment, idx) -> float:
    act = assignment[idx]
    if act is None:
        return 0.0
    atom = atomized.atoms[idx]
    pop = atomized.population
    key, S = _assignment_profile(atomized, assignment)
    sol = cache.solve_counts(key, S)
    spread = float(sol.lambda2[act[1]] - sol.lambda1[act[0]])
    if atom.driver_class == "commuter":
        return spread - pop.commuter_kappa - atom.theta
    return spread - float(pop.ondemand_kappa[act[0], act[1]]) - atom.theta


@dataclass
class BruteForceResult:
    assignment: tuple
    social_cost: float
    mode: str                    # "exhaustive" | "greedy"
    locally_optimal: bool
    dispatch_solves: int

    def participating(self) -> list[int]:
        return [k for k, act in enumerate(self.assignment) if act is not None]


def brute_force_sw(
    net: PowerNetwork,
    atomized: AtomizedPopulation,
    exhaustive_limit: int = 1_000_000,
    allow_greedy: bool = True,
) -> BruteForceResult:
    """Minimize discretized social cost over atom assignments.

    Exhaustive enumeration (exact) when the joint action space is at most
    ``exhaustive_limit``; otherwise greedy by ascending inconvenience cost with
    single-atom exchange improvement, returning a local-optimality certificate.
    """
    atoms = atomized.atoms
    action_sets = [_atom_actions(atomized, a) for a in atoms]
    space = 1
    for acts in action_sets:
        space *= len(acts)
        if space > exhaustive_limit:
            break

    cache = _CachedDispatch(net)

    def total_cost(assignment) -> float:
        key, S = _assignment_profile(atomized, assignment)
        sol = cache.solve_counts(key, S)
        cost = sol.J
        for atom, act in zip(atoms, assignment):
            cost += _atom_cost(atomized, atom, act)
        return cost

    if space <= exhaustive_limit:
        best_assignment, best_cost = None, np.inf
        for assignment in itertools.product(*action_sets):
            cost = total_cost(assignment)
            if cost < best_cost - 1e-15:
                best_assignment, best_cost = assignment, cost
        return BruteForceResult(
            assignment=tuple(best_assignment), social_cost=best_cost,
            mode="exhaustive", locally_optimal=True,
            dispatch_solves=cache.misses,
        )

    if not allow_greedy:
        raise ValueError(
            f"action space {space} exceeds exhaustive limit {exhaustive_limit}"
        )

    # greedy by ascending theta, then single-atom exchange until stable
    assignment: list = [None] * len(atoms)
    cost = total_cost(assignment)
    for idx in _sweep_order(atomized):
        best_act, best_cost = assignment[idx], cost
        for act in action_sets[idx]:
            assignment[idx] = act
            c = total_cost(assignment)
            if c < best_cost - 1e-12:
                best_act, best_cost = act, c
        assignment[idx] = best_act
        cost = best_cost

    improved = True
    passes = 0
    while improved and passes < 100:
        improved = False
        passes += 1
        for idx in range(len(atoms)):
            for act in action_sets[idx]:
                if act == assignment[idx]:
                    continue
                old = assignment[idx]
                assignment[idx] = act
                c = total_cost(assignment)
                if c < cost - 1e-12:
                    cost = c
                    improved = True
                else:
                    assignment[idx] = old
    return BruteForceResult(
        assignment=tuple(assignment), social_cost=cost,
        mode="greedy", locally_optimal=not improved,
        dispatch_solves=cache.misses,
    )


@dataclass
class GradientComparison:
    S: np.ndarray
    analytic: np.ndarray
    central: np.ndarray
    forward: np.ndarray
    backward: np.ndarray

    @property
    def kink_free(self) -> np.ndarray:
        """Routes where the one-sided differences agree (no curvature jump)."""
        return np.abs(self.forward - self.backward) <= 5e-4 + 1e-3 * np.abs(self.central)

    @property
    def max_error(self) -> float:
        err = np.abs(self.analytic - self.central)
        masked = err[self.kink_free]
        return float(masked.max()) if masked.size else 0.0


def compare_gradients(net: PowerNetwork, S, h: float = 1e-4) -> GradientComparison:
    """Analytic spread-based gradient against difference quotients.

    Also reports both one-sided quotients: their disagreement marks a kink
    (positive-part switch or constraint activation within the stencil), where
    the two-sided comparison is not meaningful.
    """
    from .dispatch import storage_value_gradient
    solver = get_solver(net)
    if isinstance(S, RouteStorage):
        S = S.values
    S = np.asarray(S, dtype=float).reshape(-1)
    analytic = storage_value_gradient(net, S)
    R = S.shape[0]
    forward = np.zeros(R)
    backward = np.zeros(R)
    J_base = solver.solve(S).J
    for r in range(R):
        e = np.zeros(R)
        e[r] = h
        J_plus = solver.solve(S + e).J
        forward[r] = (J_plus - J_base) / h
        if S[r] >= h:
            J_minus = solver.solve(S - e).J
            backward[r] = (J_base - J_minus) / h
        else:
            backward[r] = forward[r]
    central = 0.5 * (forward + backward)
    return GradientComparison(S=S, analytic=analytic, central=central,
                              forward=forward, backward=backward)


def finite_difference_gradient(net: PowerNetwork, S, h: float = 1e-4) -> np.ndarray:
    """Per-route difference quotient of the dispatch cost.

    Central differences where the route capacity allows S - h >= 0, forward
    differences at the zero boundary.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    solver = get_solver(net)
    if isinstance(S, RouteStorage):
        S = S.values
    S = np.asarray(S, dtype=float).reshape(-1)
    R = S.shape[0]
    grad = np.zeros(R)
    J_base = None
    for r in range(R):
        e = np.zeros(R)
        e[r] = h
        J_plus = solver.solve(S + e).J
        if S[r] >= h:
            J_minus = solver.solve(S - e).J
            grad[r] = (J_plus - J_minus) / (2.0 * h)
        else:
            if J_base is None:
                J_base = solver.solve(S).J
            grad[r] = (J_plus - J_base) / h
    return grad
