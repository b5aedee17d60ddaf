"""Storage participation solution concepts: myopic, social welfare, Nash.

Two genuinely different algorithms back the non-myopic concepts, so their
agreement in tests is evidence rather than tautology:

* social welfare: proximal-gradient minimization of the convex composite
  ``dispatch cost + participation costs``, where the participation term's
  proximal step has an exact per-route form (scalar bisection against the
  quantile function, water-filling across routes for the on-demand pool);
* Nash equilibrium: damped fixed-point iteration on participation thresholds
  (default damping 0.5, halved when the residual oscillates) combined with a
  projected payoff-improving reallocation of on-demand mass across routes.

Both report the same residual: the largest violation, in cost units, of the
threshold conditions (participating mass consistent with the price spread net
of route costs, active on-demand routes equalized, inactive ones no better).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dispatch import DispatchSolution, get_solver
from .drivers import CostDistribution, DriverPopulation
from .network import PowerNetwork, RouteStorage

INTERNAL_TOL = 1e-8
ACCEPT_TOL = 1e-6
MAX_ITER = 10_000
ACTIVE_EPS = 1e-9


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point solve is required to converge but did not."""


@dataclass
class SolverTelemetry:
    iterations: int = 0
    dispatch_solves: int = 0
    residual_trajectory_len: int = 0
    converged: bool = True
    final_damping: float | None = None
    degenerate_split: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "dispatch_solves": self.dispatch_solves,
            "residual_trajectory_len": self.residual_trajectory_len,
            "converged": self.converged,
            "final_damping": self.final_damping,
            "degenerate_split": self.degenerate_split,
        }


@dataclass
class DeviationEntry:
    driver_class: str   # "commuter" | "ondemand"
    kind: str           # "stop" | "start" | "switch"
    route: tuple[int, int] | None
    theta: float
    gain: float

    def to_dict(self) -> dict:
        return {
            "driver_class": self.driver_class,
            "kind": self.kind,
            "route": None if self.route is None else [self.route[0] + 1, self.route[1] + 1],
            "theta": self.theta,
            "gain": self.gain,
        }


@dataclass
class DeviationReport:
    """Worst profitable unilateral deviation per driver class."""

    epsilon: float
    max_gain: float
    passes: bool
    worst: list[DeviationEntry] = field(default_factory=list)
    grid_size: int = 0

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "max_gain": self.max_gain,
            "passes": self.passes,
            "grid_size": self.grid_size,
            "worst": [e.to_dict() for e in self.worst],
        }


@dataclass
class EquilibriumResult:
    """Thresholds, storage decomposition, prices and diagnostics for a concept."""

    concept: str
    n: int
    thresholds_fix: np.ndarray       # (n, n) commuter thresholds spread - kappa
    threshold_flex: float            # scalar on-demand threshold, NaN if absent
    S_fix: RouteStorage
    S_flex: RouteStorage
    lambda1: np.ndarray
    lambda2: np.ndarray
    J: float
    residual: float
    telemetry: SolverTelemetry
    deviation_report: DeviationReport | None = None

    @property
    def S(self) -> RouteStorage:
        return RouteStorage(n=self.n, values=self.S_fix.values + self.S_flex.values)

    def spread_matrix(self) -> np.ndarray:
        return self.lambda2[None, :] - self.lambda1[:, None]

    def to_dict(self) -> dict:
        return {
            "concept": self.concept,
            "n": self.n,
            "thresholds_fix": self.thresholds_fix.tolist(),
            "threshold_flex": self.threshold_flex,
            "S_fix": self.S_fix.values.tolist(),
            "S_flex": self.S_flex.values.tolist(),
            "lambda1": self.lambda1.tolist(),
            "lambda2": self.lambda2.tolist(),
            "J": self.J,
            "residual": self.residual,
            "telemetry": self.telemetry.to_dict(),
            "deviation_report": (None if self.deviation_report is None
                                 else self.deviation_report.to_dict()),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EquilibriumResult":
        tel = SolverTelemetry(**data["telemetry"])
        rep = None
        if data.get("deviation_report") is not None:
            raw = dict(data["deviation_report"])
            worst = [DeviationEntry(
                driver_class=e["driver_class"], kind=e["kind"],
                route=None if e["route"] is None else (e["route"][0] - 1, e["route"][1] - 1),
                theta=e["theta"], gain=e["gain"]) for e in raw.pop("worst")]
            rep = DeviationReport(worst=worst, **raw)
        n = int(data["n"])
        return cls(
            concept=data["concept"], n=n,
            thresholds_fix=np.asarray(data["thresholds_fix"], dtype=float),
            threshold_flex=float(data["threshold_flex"]) if data["threshold_flex"] is not None else np.nan,
            S_fix=RouteStorage(n=n, values=np.asarray(data["S_fix"], dtype=float)),
            S_flex=RouteStorage(n=n, values=np.asarray(data["S_flex"], dtype=float)),
            lambda1=np.asarray(data["lambda1"], dtype=float),
            lambda2=np.asarray(data["lambda2"], dtype=float),
            J=float(data["J"]), residual=float(data["residual"]),
            telemetry=tel, deviation_report=rep,
        )


# ---------------------------------------------------------------------------
# residual: the shared definition of "solved" for both algorithms
# ---------------------------------------------------------------------------

def participation_residual(
    pop: DriverPopulation,
    spread: np.ndarray,
    S_fix_mat: np.ndarray,
    S_flex_mat: np.ndarray | None,
) -> float:
    """Largest threshold-condition violation, in cost units.

    Commuter routes: the net spread must lie in the set-valued quantile of the
    participating mass. On-demand pool: total mass must be consistent with the
    best net spread, and every route carrying mass must achieve it.
    """
    worst = 0.0
    kap = pop.commuter_kappa
    for (i, j), dist in pop.commuter.items():
        if dist.finite_mass <= 0:
            continue
        target = spread[i, j] - kap
        q = min(max(float(S_fix_mat[i, j]), 0.0), dist.finite_mass)
        lo, hi = dist.inverse_interval(q)
        worst = max(worst, lo - target, target - hi)
    if pop.has_ondemand and S_flex_mat is not None:
        phi = spread - pop.ondemand_kappa
        theta_bar = float(phi.max())
        q = min(max(float(S_flex_mat.sum()), 0.0), pop.ondemand.finite_mass)
        lo, hi = pop.ondemand.inverse_interval(q)
        worst = max(worst, lo - theta_bar, theta_bar - hi)
        active = S_flex_mat > ACTIVE_EPS
        if active.any():
            worst = max(worst, float((theta_bar - phi[active]).max()))
    return max(worst, 0.0)


# ---------------------------------------------------------------------------
# proximal steps for the welfare composite
# ---------------------------------------------------------------------------

def _prox_commuter(dist: CostDistribution, kappa: float, y: float, t: float) -> float:
    """argmin over x in [0, mass] of participation cost + (x - y)^2 / 2t."""
    fm = dist.finite_mass

    def psi(x: float) -> float:
        return dist.inverse(min(x, fm)) + kappa + (x - y) / t

    if psi(0.0) >= 0.0:
        return 0.0
    if psi(fm) <= 0.0:
        return fm
    lo, hi = 0.0, fm
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if psi(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _prox_flex(dist: CostDistribution, kap_flat: np.ndarray, y: np.ndarray,
               t: float) -> np.ndarray:
    """Proximal step of the on-demand participation cost over all routes.

    Water-filling: x_r = (y_r - t*(kappa_r + nu))_+ with the level nu chosen
    so that the total mass matches the CDF at nu (monotone crossing, bisected).
    """
    def total(nu: float) -> float:
        return float(np.maximum(y - t * (kap_flat + nu), 0.0).sum())

    nu_hi = float(np.max(y - t * kap_flat)) / t
    nu_lo = min(dist.theta_min, nu_hi) - 1.0
    if total(nu_hi) >= dist.eval(nu_hi):
        nu = nu_hi
    else:
        lo, hi = nu_lo, nu_hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if total(mid) - dist.eval(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        nu = 0.5 * (lo + hi)
    return np.maximum(y - t * (kap_flat + nu), 0.0)


def _project_mass_simplex(v: np.ndarray, q: float) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = q}."""
    if q <= 0.0:
        return np.zeros_like(v)
    srt = np.sort(v)[::-1]
    csum = np.cumsum(srt) - q
    k = np.arange(1, v.size + 1)
    cond = srt - csum / k > 0
    rho = int(np.nonzero(cond)[0][-1])
    tau = csum[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


# ---------------------------------------------------------------------------
# shared state helpers
# ---------------------------------------------------------------------------

def _flex_kappa_flat(pop: DriverPopulation) -> np.ndarray:
    return np.asarray(pop.ondemand_kappa, dtype=float).reshape(-1)


def _probe_step(net: PowerNetwork, solver, base_S: np.ndarray) -> float:
    """Curvature estimate of the spread map for initial step sizing."""
    delta = 1e-2
    s0 = solver.solve(base_S)
    s1 = solver.solve(base_S + delta)
    g0 = -np.maximum(s0.spread_matrix().reshape(-1), 0.0)
    g1 = -np.maximum(s1.spread_matrix().reshape(-1), 0.0)
    lip = float(np.abs(g1 - g0).max()) / delta
    return 1.0 / max(lip, 1e-3)


def _result_from_state(
    concept: str,
    net: PowerNetwork,
    pop: DriverPopulation,
    sol: DispatchSolution,
    S_fix_mat: np.ndarray,
    S_flex_mat: np.ndarray | None,
    residual: float,
    telemetry: SolverTelemetry,
) -> EquilibriumResult:
    spread = sol.spread_matrix()
    thresholds_fix = spread - pop.commuter_kappa
    if pop.has_ondemand:
        threshold_flex = float((spread - pop.ondemand_kappa).max())
    else:
        threshold_flex = np.nan
    flex_vals = np.zeros(net.n_routes) if S_flex_mat is None else S_flex_mat.reshape(-1)
    return EquilibriumResult(
        concept=concept, n=net.n,
        thresholds_fix=thresholds_fix, threshold_flex=threshold_flex,
        S_fix=RouteStorage(n=net.n, values=S_fix_mat.reshape(-1)),
        S_flex=RouteStorage(n=net.n, values=flex_vals),
        lambda1=sol.lambda1.copy(), lambda2=sol.lambda2.copy(),
        J=sol.J, residual=residual, telemetry=telemetry,
    )


def _flag_degenerate_split(net, solver, S_fix_vec, S_flex_vec, pop, spread,
                           tie_tol: float = 1e-7) -> bool:
    """Probe whether the converged on-demand split is underdetermined.

    With at least two active tied routes, moving a sliver of mass between them
    leaves the net spreads unchanged exactly when the dispatch cost is flat
    across the split.
    """
    if S_flex_vec is None:
        return False
    phi = (spread - pop.ondemand_kappa).reshape(-1)
    theta_bar = phi.max()
    tied = np.nonzero((theta_bar - phi <= tie_tol) & (S_flex_vec > ACTIVE_EPS))[0]
    if tied.size < 2:
        return False
    delta = min(1e-4, 0.5 * S_flex_vec[tied[0]])
    if delta < 1e-7:
        return False  # too little mass to probe curvature reliably
    probe = S_flex_vec.copy()
    probe[tied[0]] -= delta
    probe[tied[1]] += delta
    sol = solver.solve(S_fix_vec + probe)
    phi2 = (sol.spread_matrix() - pop.ondemand_kappa).reshape(-1)
    return bool(np.abs(phi2[tied] - phi[tied]).max() <= 1e-8)


# ---------------------------------------------------------------------------
# myopic benchmarks (participation priced at zero storage)
# ---------------------------------------------------------------------------

def solve_myopic_commuter(net: PowerNetwork, pop: DriverPopulation) -> EquilibriumResult:
    """Commuters decide at zero-storage prices, ignoring their price impact.

    One dispatch at S = 0 fixes the thresholds; the result's prices are then
    re-evaluated at the committed storage for comparison only.
    """
    return _solve_myopic(net, pop.commuter_only(), concept="myopic")


def solve_myopic_ondemand(net: PowerNetwork, pop: DriverPopulation) -> EquilibriumResult:
    """All myopic on-demand mass piles onto the single best route at zero
    storage; ties break to the lexicographically smallest (origin, dest)."""
    return _solve_myopic(net, pop.ondemand_only(), concept="myopic")


def solve_myopic_hybrid(net: PowerNetwork, pop: DriverPopulation) -> EquilibriumResult:
    """Both driver classes decide at zero-storage prices simultaneously."""
    return _solve_myopic(net, pop, concept="myopic")


def _solve_myopic(net, pop, concept):
    solver = get_solver(net)
    solves0 = solver.solve_count
    sol0 = solver.solve(np.zeros(net.n_routes))
    spread0 = sol0.spread_matrix()

    S_fix_mat = np.zeros((net.n, net.n))
    for (i, j), dist in pop.commuter.items():
        S_fix_mat[i, j] = dist.eval(spread0[i, j] - pop.commuter_kappa)

    S_flex_mat = np.zeros((net.n, net.n))
    if pop.has_ondemand:
        phi0 = (spread0 - pop.ondemand_kappa).reshape(-1)
        r_star = _lexicographic_argmax(phi0)
        theta_bar = float(phi0[r_star])
        S_flex_mat.reshape(-1)[r_star] = pop.ondemand.eval(theta_bar)

    sol = solver.solve(S_fix_mat.reshape(-1) + S_flex_mat.reshape(-1))
    residual = participation_residual(pop, sol.spread_matrix(), S_fix_mat, S_flex_mat)
    telemetry = SolverTelemetry(
        iterations=1, dispatch_solves=solver.solve_count - solves0,
        residual_trajectory_len=1, converged=True, final_damping=None,
    )
    result = _result_from_state(concept, net, pop, sol, S_fix_mat, S_flex_mat,
                                residual, telemetry)
    # myopic thresholds are the zero-storage ones, not the re-evaluated spreads
    result.thresholds_fix = spread0 - pop.commuter_kappa
    if pop.has_ondemand:
        result.threshold_flex = float((spread0 - pop.ondemand_kappa).max())
    return result


def _lexicographic_argmax(values: np.ndarray, tol: float = 1e-9) -> int:
    best = float(values.max())
    return int(np.nonzero(values >= best - tol)[0][0])


# ---------------------------------------------------------------------------
# social welfare: proximal gradient on the convex composite
# ---------------------------------------------------------------------------

def solve_sw_commuter(net, pop, tol=INTERNAL_TOL, max_iter=MAX_ITER):
    return _solve_sw(net, pop.commuter_only(), tol=tol, max_iter=max_iter)


def solve_sw_ondemand(net, pop, tol=INTERNAL_TOL, max_iter=MAX_ITER):
    return _solve_sw(net, pop.ondemand_only(), tol=tol, max_iter=max_iter)


def solve_sw_hybrid(net, pop, tol=INTERNAL_TOL, max_iter=MAX_ITER):
    return _solve_sw(net, pop, tol=tol, max_iter=max_iter)


def _solve_sw(net: PowerNetwork, pop: DriverPopulation, *, tol, max_iter):
    n, R = net.n, net.n_routes
    solver = get_solver(net)
    solves0 = solver.solve_count
    routes = pop.commuter_routes()
    has_flex = pop.has_ondemand
    kap_flat = _flex_kappa_flat(pop) if has_flex else None
    agg_idx = np.array([i * n + j for (i, j) in routes], dtype=int)

    x_fix = np.zeros(len(routes))
    x_flex = np.zeros(R) if has_flex else None

    def aggregate(xf, xo):
        S = np.zeros(R)
        if xf.size:
            S[agg_idx] += xf
        if xo is not None:
            S += xo
        return S

    step = 0.5 * _probe_step(net, solver, aggregate(x_fix, x_flex))
    sol = solver.solve(aggregate(x_fix, x_flex))
    residuals = []
    best = None
    converged = False
    iterations = 0
    prev_res = np.inf
    bad_streak = 0

    for iterations in range(1, max_iter + 1):
        spread = sol.spread_matrix()
        S_fix_mat = np.zeros((n, n))
        if x_fix.size:
            S_fix_mat.reshape(-1)[agg_idx] = x_fix
        S_flex_mat = x_flex.reshape(n, n) if has_flex else None
        res = participation_residual(pop, spread, S_fix_mat, S_flex_mat)
        residuals.append(res)
        if best is None or res < best[0]:
            best = (res, x_fix.copy(), None if x_flex is None else x_flex.copy(), sol)
        if res <= tol:
            converged = True
            break

        # step control on the residual trend: objective-based line search is
        # unreliable near the optimum, where true decreases sit below the
        # dispatch evaluation noise
        if res > prev_res * (1.0 + 1e-12):
            bad_streak += 1
            if bad_streak >= 2:
                step = max(step * 0.5, 1e-12)
                bad_streak = 0
        else:
            bad_streak = 0
        prev_res = res

        grad = -np.maximum(spread.reshape(-1), 0.0)
        y_fix = x_fix - step * grad[agg_idx] if x_fix.size else x_fix
        x_fix = np.array([
            _prox_commuter(pop.commuter[routes[k]], pop.commuter_kappa,
                           y_fix[k], step)
            for k in range(len(routes))
        ]) if x_fix.size else x_fix
        if has_flex:
            x_flex = _prox_flex(pop.ondemand, kap_flat, x_flex - step * grad, step)
        sol = solver.solve(aggregate(x_fix, x_flex))

    if not converged and best is not None:
        _, x_fix, x_flex, sol = best

    S_fix_mat = np.zeros((n, n))
    if x_fix.size:
        S_fix_mat.reshape(-1)[agg_idx] = x_fix
    S_flex_mat = x_flex.reshape(n, n) if has_flex else None
    spread = sol.spread_matrix()
    res = participation_residual(pop, spread, S_fix_mat, S_flex_mat)
    telemetry = SolverTelemetry(
        iterations=iterations,
        dispatch_solves=solver.solve_count - solves0,
        residual_trajectory_len=len(residuals),
        converged=converged,
        final_damping=step,
    )
    if has_flex:
        telemetry.degenerate_split = _flag_degenerate_split(
            net, solver, S_fix_mat.reshape(-1),
            None if x_flex is None else x_flex, pop, spread)
    return _result_from_state("social-welfare", net, pop, sol, S_fix_mat,
                              S_flex_mat, res, telemetry)


# ---------------------------------------------------------------------------
# Nash equilibrium: damped threshold iteration + projected reallocation
# ---------------------------------------------------------------------------

def solve_ne_commuter(net, pop, tol=INTERNAL_TOL, max_iter=MAX_ITER,
                      verify=True, epsilon=1e-5):
    return _solve_ne(net, pop.commuter_only(), tol=tol, max_iter=max_iter,
                     verify=verify, epsilon=epsilon)


def solve_ne_ondemand(net, pop, tol=INTERNAL_TOL, max_iter=MAX_ITER,
                      verify=True, epsilon=1e-5):
    return _solve_ne(net, pop.ondemand_only(), tol=tol, max_iter=max_iter,
                     verify=verify, epsilon=epsilon)


def solve_ne_hybrid(net, pop, tol=INTERNAL_TOL, max_iter=MAX_ITER,
                    verify=True, epsilon=1e-5):
    return _solve_ne(net, pop, tol=tol, max_iter=max_iter,
                     verify=verify, epsilon=epsilon)


def _solve_ne(net: PowerNetwork, pop: DriverPopulation, *, tol, max_iter,
              verify=True, epsilon=1e-5, alpha0=0.5):
    n, R = net.n, net.n_routes
    solver = get_solver(net)
    solves0 = solver.solve_count
    routes = pop.commuter_routes()
    has_flex = pop.has_ondemand
    kap_flat = _flex_kappa_flat(pop) if has_flex else None
    agg_idx = np.array([i * n + j for (i, j) in routes], dtype=int)

    sol = solver.solve(np.zeros(R))
    spread = sol.spread_matrix()
    theta_fix = np.array([spread[i, j] - pop.commuter_kappa for (i, j) in routes])
    if has_flex:
        phi = (spread - pop.ondemand_kappa).reshape(-1)
        theta_flex = float(phi.max())
        S_flex = np.zeros(R)
        S_flex[_lexicographic_argmax(phi)] = pop.ondemand.eval(theta_flex)
    else:
        theta_flex = np.nan
        S_flex = None

    base_step = _probe_step(net, solver, np.zeros(R))
    alpha = alpha0
    eta = alpha0 * base_step
    prev_res = np.inf
    bad_streak = 0
    residuals = []
    best = None
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        S_fix_vec = np.zeros(R)
        for k, (i, j) in enumerate(routes):
            S_fix_vec[agg_idx[k]] = pop.commuter[(i, j)].eval(theta_fix[k])
        S_total = S_fix_vec + (S_flex if has_flex else 0.0)
        sol = solver.solve(S_total)
        spread = sol.spread_matrix()
        S_flex_mat = S_flex.reshape(n, n) if has_flex else None
        res = participation_residual(pop, spread, S_fix_vec.reshape(n, n), S_flex_mat)
        residuals.append(res)
        if best is None or res < best[0]:
            best = (res, theta_fix.copy(),
                    None if S_flex is None else S_flex.copy(), sol, S_fix_vec.copy())
        if res <= tol:
            converged = True
            break

        if res > prev_res * (1.0 + 1e-12):
            bad_streak += 1
            if bad_streak >= 2:
                alpha = max(alpha * 0.5, 1e-4)
                eta = max(eta * 0.5, 1e-8)
                bad_streak = 0
        else:
            bad_streak = 0
        prev_res = res

        targets = np.array([spread[i, j] - pop.commuter_kappa for (i, j) in routes])
        theta_fix = (1.0 - alpha) * theta_fix + alpha * targets
        if has_flex:
            phi = (spread - pop.ondemand_kappa).reshape(-1)
            theta_flex = (1.0 - alpha) * theta_flex + alpha * float(phi.max())
            q = pop.ondemand.eval(theta_flex)
            S_flex = _project_mass_simplex(S_flex + eta * phi, q)

    if not converged and best is not None:
        _, theta_fix, S_flex, sol, S_fix_vec = best
    else:
        S_fix_vec = np.zeros(R)
        for k, (i, j) in enumerate(routes):
            S_fix_vec[agg_idx[k]] = pop.commuter[(i, j)].eval(theta_fix[k])

    spread = sol.spread_matrix()
    S_fix_mat = S_fix_vec.reshape(n, n)
    S_flex_mat = S_flex.reshape(n, n) if has_flex else None
    res = participation_residual(pop, spread, S_fix_mat, S_flex_mat)
    telemetry = SolverTelemetry(
        iterations=iterations,
        dispatch_solves=solver.solve_count - solves0,
        residual_trajectory_len=len(residuals),
        converged=converged,
        final_damping=alpha,
    )
    if has_flex:
        telemetry.degenerate_split = _flag_degenerate_split(
            net, solver, S_fix_vec, S_flex, pop, spread)
    result = _result_from_state("nash", net, pop, sol, S_fix_mat, S_flex_mat,
                                res, telemetry)
    if verify:
        result.deviation_report = verify_equilibrium(net, pop, result,
                                                     epsilon=epsilon)
    return result


# ---------------------------------------------------------------------------
# deviation audit
# ---------------------------------------------------------------------------

def _theta_grid(dist: CostDistribution, grid: int, extra: list[float]) -> np.ndarray:
    pts = [dist.quantile_midpoints(grid)] if dist.finite_mass > 0 else []
    pts.append(np.asarray(dist.thetas, dtype=float))
    pts.append(np.asarray([e for e in extra if np.isfinite(e)], dtype=float))
    merged = np.concatenate(pts) if pts else np.array([])
    merged = merged[(merged >= dist.theta_min) & (merged <= dist.theta_max)]
    return np.unique(merged)


def verify_equilibrium(
    net: PowerNetwork,
    pop: DriverPopulation,
    candidate: EquilibriumResult,
    epsilon: float = 1e-5,
    grid: int = 201,
) -> DeviationReport:
    """Audit a candidate against unilateral deviations on a theta grid.

    One dispatch at the candidate storage fixes the prices; for each driver
    type the report compares its current payoff (per the candidate thresholds)
    against its best alternative: stop or start providing, and for on-demand
    drivers also switching routes. Passes when no gain exceeds epsilon.
    """
    solver = get_solver(net)
    sol = solver.solve(candidate.S.values)
    spread = sol.spread_matrix()
    entries: list[DeviationEntry] = []

    kap = pop.commuter_kappa
    for (i, j), dist in pop.commuter.items():
        if dist.finite_mass <= 0:
            continue
        thr = float(candidate.thresholds_fix[i, j])
        thetas = _theta_grid(dist, grid, [thr])
        payoff = spread[i, j] - kap - thetas
        participating = thetas <= thr + 1e-12
        gains = np.where(participating, -payoff, payoff)
        k_worst = int(np.argmax(gains))
        entries.append(DeviationEntry(
            driver_class="commuter",
            kind="stop" if participating[k_worst] else "start",
            route=(i, j), theta=float(thetas[k_worst]),
            gain=float(max(gains[k_worst], 0.0))))

    if pop.has_ondemand:
        phi = spread - pop.ondemand_kappa
        phi_flat = phi.reshape(-1)
        best_route = _lexicographic_argmax(phi_flat)
        best_phi = float(phi_flat[best_route])
        thr = float(candidate.threshold_flex) if np.isfinite(candidate.threshold_flex) else -np.inf
        active = candidate.S_flex.values > ACTIVE_EPS
        thetas = _theta_grid(pop.ondemand, grid, [thr])
        if active.any():
            worst_r = int(np.nonzero(active)[0][np.argmin(phi_flat[active])])
            phi_cur = float(phi_flat[worst_r])
        else:
            worst_r, phi_cur = None, None
        for theta in thetas:
            if theta <= thr + 1e-12 and worst_r is not None:
                stop_gain = -(phi_cur - theta)
                switch_gain = best_phi - phi_cur
                if switch_gain >= stop_gain:
                    kind, gain, route = "switch", switch_gain, divmod(best_route, net.n)
                else:
                    kind, gain, route = "stop", stop_gain, divmod(worst_r, net.n)
            else:
                kind = "start"
                gain = best_phi - theta
                route = divmod(best_route, net.n)
            entries.append(DeviationEntry(
                driver_class="ondemand", kind=kind, route=route,
                theta=float(theta), gain=float(max(gain, 0.0))))

    max_gain = max((e.gain for e in entries), default=0.0)
    worst_per_class: dict[tuple[str, str], DeviationEntry] = {}
    for e in entries:
        key = (e.driver_class, e.kind)
        if key not in worst_per_class or e.gain > worst_per_class[key].gain:
            worst_per_class[key] = e
    worst = sorted(worst_per_class.values(), key=lambda e: -e.gain)
    return DeviationReport(
        epsilon=epsilon, max_gain=max_gain, passes=max_gain <= epsilon,
        worst=worst, grid_size=grid,
    )


_CONCEPT_SOLVERS = {
    ("myopic", "commuter"): solve_myopic_commuter,
    ("myopic", "ondemand"): solve_myopic_ondemand,
    ("myopic", "hybrid"): solve_myopic_hybrid,
    ("sw", "commuter"): solve_sw_commuter,
    ("sw", "ondemand"): solve_sw_ondemand,
    ("sw", "hybrid"): solve_sw_hybrid,
    ("ne", "commuter"): solve_ne_commuter,
    ("ne", "ondemand"): solve_ne_ondemand,
    ("ne", "hybrid"): solve_ne_hybrid,
}


def solve_concept(net: PowerNetwork, pop: DriverPopulation, concept: str,
                  population: str, **kwargs) -> EquilibriumResult:
    """Dispatch table over (concept, driver population) pairs."""
    try:
        fn = _CONCEPT_SOLVERS[(concept, population)]
    except KeyError:
        raise ValueError(f"unknown concept/population pair ({concept}, {population})")
    return fn(net, pop, **kwargs)
