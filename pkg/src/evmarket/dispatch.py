"""Two-period transmission-constrained economic dispatch with mobile storage.

The dispatch is a convex QP over generation, served load, storage operations
and net injections. Nodal prices are the duals of the injection-definition
constraints; the sign convention is anchored so that at an interior optimum
the price equals the marginal generation cost. Storage on route i -> j is
charged at bus i in period 0 and discharged at bus j in period 1; positive
operation values mean charging.

Every returned solution is KKT-certified: primal feasibility within 1e-7 and
stationarity/complementarity within 1e-6, re-solving with fallback solvers if
the first attempt misses those residuals.
"""

from __future__ import annotations

import threading
import warnings
import weakref
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .network import PowerNetwork, RouteStorage, route_index

PRIMAL_TOL = 1e-7
DUAL_TOL = 1e-6

# Degenerate-dual refinement. A period with no load, no generation and no
# storage activity leaves the nodal prices non-unique (any sufficiently low
# price supports the optimum). The economically meaningful prices are the
# limits from perturbed problems: we re-solve with a small virtual load at
# every bus and extrapolate the duals to zero load. Dual paths of a QP are
# piecewise linear in the perturbation, so two points extrapolate exactly;
# the perturbations are large enough that solver complementarity noise
# (~tol/eps) stays below the certification tolerance.
_REFINE_EPS = (1e-4, 5e-5)
_ACTIVITY_EPS = 1e-6

_SOLVER_CHAIN = (
    ("CLARABEL", dict(tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)),
    ("OSQP", dict(eps_abs=1e-11, eps_rel=1e-11, max_iter=400_000, polishing=True)),
    ("SCS", dict(eps=1e-11, max_iters=200_000)),
)


class DispatchError(RuntimeError):
    """Solver failure: infeasible, unbounded, or duals below required accuracy."""


@dataclass(frozen=True)
class KKTResiduals:
    """Max-norm optimality residuals of a dispatch solution."""

    primal: float
    stationarity: float
    complementarity: float

    @property
    def certified(self) -> bool:
        return (self.primal <= PRIMAL_TOL
                and self.stationarity <= DUAL_TOL
                and self.complementarity <= DUAL_TOL)


@dataclass(frozen=True, eq=False)
class DispatchSolution:
    """Primal/dual optimum of the two-period dispatch at storage profile S."""

    n: int
    S: np.ndarray          # (n*n,) storage capacities, origin-major
    g: np.ndarray          # (n, 2) generation
    d: np.ndarray          # (n, 2) served load
    u: np.ndarray          # (n*n, 2) storage operations, positive = charging
    p: np.ndarray          # (n, 2) net injections
    J: float               # optimal cost minus utility
    lambda1: np.ndarray    # (n,) period-1 nodal prices
    lambda2: np.ndarray    # (n,) period-2 nodal prices
    mu: np.ndarray         # (m, 2) line-constraint duals
    storage_duals: np.ndarray  # (n*n, 4): u1>=0, u1<=S, soc>=0, soc<=S
    kkt: KKTResiduals
    solver: str

    def spread_matrix(self) -> np.ndarray:
        """spread[i, j] = price at destination j, period 2, minus origin i, period 1."""
        return self.lambda2[None, :] - self.lambda1[:, None]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "S": self.S.tolist(),
            "g": self.g.tolist(),
            "d": self.d.tolist(),
            "u": self.u.tolist(),
            "p": self.p.tolist(),
            "J": self.J,
            "lambda1": self.lambda1.tolist(),
            "lambda2": self.lambda2.tolist(),
            "mu": self.mu.tolist(),
            "storage_duals": self.storage_duals.tolist(),
            "kkt": {
                "primal": self.kkt.primal,
                "stationarity": self.kkt.stationarity,
                "complementarity": self.kkt.complementarity,
            },
            "solver": self.solver,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DispatchSolution":
        kkt = data["kkt"]
        return cls(
            n=int(data["n"]),
            S=np.asarray(data["S"], dtype=float),
            g=np.asarray(data["g"], dtype=float),
            d=np.asarray(data["d"], dtype=float),
            u=np.asarray(data["u"], dtype=float),
            p=np.asarray(data["p"], dtype=float),
            J=float(data["J"]),
            lambda1=np.asarray(data["lambda1"], dtype=float),
            lambda2=np.asarray(data["lambda2"], dtype=float),
            mu=np.asarray(data["mu"], dtype=float).reshape(-1, 2),
            storage_duals=np.asarray(data["storage_duals"], dtype=float).reshape(-1, 4),
            kkt=KKTResiduals(kkt["primal"], kkt["stationarity"], kkt["complementarity"]),
            solver=data["solver"],
        )


class DispatchSolver:
    """Compiled parametric dispatch problem for one network.

    The QP is built once; successive storage profiles re-solve through cvxpy's
    parameter path. Instances hold a mutable solve counter and a lock, so each
    concurrent worker should use its own instance (the network itself is
    immutable and shareable).
    """

    def __init__(self, net: PowerNetwork):
        self.net = net
        self.solve_count = 0
        self._lock = threading.Lock()
        n, R, m = net.n, net.n_routes, net.m

        # origin/destination incidence: route r = i*n + j
        origin = np.zeros((n, R))
        dest = np.zeros((n, R))
        for i in range(n):
            for j in range(n):
                origin[i, i * n + j] = 1.0
                dest[j, i * n + j] = 1.0

        self._S = cp.Parameter(R, nonneg=True)
        g = cp.Variable((n, 2))
        d = cp.Variable((n, 2))
        u = cp.Variable((R, 2))
        p = cp.Variable((n, 2))
        self._vars = (g, d, u, p)

        self._eps_load = cp.Parameter(n, nonneg=True)
        self._eps_load.value = np.zeros(n)
        self._inj1 = p[:, 0] == g[:, 0] - d[:, 0] - origin @ u[:, 0] - self._eps_load
        self._inj2 = p[:, 1] == g[:, 1] - d[:, 1] - dest @ u[:, 1] - self._eps_load
        self._balance = [cp.sum(p[:, t]) == 0 for t in range(2)]
        self._lines = [net.H @ p[:, t] <= net.f_bar for t in range(2)] if m else []
        soc = u[:, 0] + u[:, 1]
        self._u1_lo = u[:, 0] >= 0
        self._u1_hi = u[:, 0] <= self._S
        self._soc_lo = soc >= 0
        self._soc_hi = soc <= self._S

        self._g_lo = g >= 0
        self._d_lo = d >= 0
        cons = [self._inj1, self._inj2, self._u1_lo, self._u1_hi,
                self._soc_lo, self._soc_hi, *self._balance, *self._lines,
                self._g_lo, self._d_lo]
        self._g_capped = np.argwhere(np.isfinite(net.gen_cap))
        self._g_hi = None
        if self._g_capped.size:
            rows, cols = self._g_capped[:, 0], self._g_capped[:, 1]
            self._g_hi = g[rows, cols] <= net.gen_cap[rows, cols]
            cons.append(self._g_hi)
        self._d_capped = np.argwhere(np.isfinite(net.util_cap))
        self._d_hi = None
        if self._d_capped.size:
            rows, cols = self._d_capped[:, 0], self._d_capped[:, 1]
            self._d_hi = d[rows, cols] <= net.util_cap[rows, cols]
            cons.append(self._d_hi)

        obj = 0
        for t in range(2):
            obj = obj + net.gen_a[:, t] @ cp.square(g[:, t]) + net.gen_b[:, t] @ g[:, t]
            obj = obj - (net.util_c[:, t] @ d[:, t] - net.util_q[:, t] @ cp.square(d[:, t]))
        self._problem = cp.Problem(cp.Minimize(obj), cons)
        self._origin = origin
        self._dest = dest

    def solve(self, S) -> DispatchSolution:
        """Solve at storage profile S (RouteStorage, flat vector, or matrix)."""
        S_vec = _as_route_vector(S, self.net.n)
        with self._lock:
            return self._solve_locked(S_vec)

    def _solve_locked(self, S_vec: np.ndarray) -> DispatchSolution:
        self._S.value = S_vec
        failures = []
        for solver_name, opts in _SOLVER_CHAIN:
            if not self._run(solver_name, opts, failures):
                continue
            primal = tuple(np.asarray(v.value, dtype=float) for v in self._vars)
            duals = self._extract_duals()
            if self._needs_refinement(primal):
                refined = self._refine_duals(solver_name, opts, failures)
                if refined is not None:
                    duals = refined
            sol = self._assemble(S_vec, primal, duals, solver_name)
            if sol.kkt.certified:
                return sol
            failures.append(
                f"{solver_name}: KKT residuals primal={sol.kkt.primal:.2e} "
                f"stationarity={sol.kkt.stationarity:.2e} "
                f"complementarity={sol.kkt.complementarity:.2e}")
        raise DispatchError(
            "no solver produced a certified optimum: " + "; ".join(failures))

    def _run(self, solver_name: str, opts: dict, failures: list[str]) -> bool:
        """One solver attempt; True when an optimal point is loaded.

        The solver's own accuracy self-assessment is ignored; certification
        against the KKT residuals decides whether a solution is accepted.
        """
        try:
            with warnings.catch_warnings():
                warnings.filterwarnings(
                    "ignore", message="Solution may be inaccurate",
                    category=UserWarning)
                self._problem.solve(solver=solver_name, **opts)
        except (cp.error.SolverError, ValueError) as exc:
            failures.append(f"{solver_name}: {exc}")
            return False
        self.solve_count += 1
        status = self._problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise DispatchError("dispatch infeasible; check demand/generation caps")
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            raise DispatchError(
                "dispatch unbounded; run network validation for uncapped utilities")
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            failures.append(f"{solver_name}: status {status}")
            return False
        return True

    def _extract_duals(self):
        net = self.net
        lambda1 = np.asarray(self._inj1.dual_value, dtype=float)
        lambda2 = np.asarray(self._inj2.dual_value, dtype=float)
        nu = np.array([float(c.dual_value) for c in self._balance])
        if self._lines:
            mu = np.column_stack([np.asarray(c.dual_value, dtype=float)
                                  for c in self._lines])
        else:
            mu = np.zeros((0, 2))
        storage_duals = np.column_stack([
            np.asarray(self._u1_lo.dual_value, dtype=float),
            np.asarray(self._u1_hi.dual_value, dtype=float),
            np.asarray(self._soc_lo.dual_value, dtype=float),
            np.asarray(self._soc_hi.dual_value, dtype=float),
        ])
        g_lo = np.asarray(self._g_lo.dual_value, dtype=float)
        d_lo = np.asarray(self._d_lo.dual_value, dtype=float)
        g_hi = np.zeros((net.n, 2))
        if self._g_hi is not None:
            rows, cols = self._g_capped[:, 0], self._g_capped[:, 1]
            g_hi[rows, cols] = np.asarray(self._g_hi.dual_value, dtype=float).reshape(-1)
        d_hi = np.zeros((net.n, 2))
        if self._d_hi is not None:
            rows, cols = self._d_capped[:, 0], self._d_capped[:, 1]
            d_hi[rows, cols] = np.asarray(self._d_hi.dual_value, dtype=float).reshape(-1)
        return lambda1, lambda2, nu, mu, storage_duals, g_lo, g_hi, d_lo, d_hi

    def _needs_refinement(self, primal) -> bool:
        g, d, u, _ = primal
        for t in range(2):
            activity = np.abs(g[:, t]).sum() + np.abs(d[:, t]).sum() + np.abs(u[:, t]).sum()
            if activity < _ACTIVITY_EPS:
                return True
        return False

    def _refine_duals(self, solver_name, opts, failures):
        """Two perturbed solves, duals extrapolated to zero virtual load."""
        sampled = []
        try:
            for eps in _REFINE_EPS:
                self._eps_load.value = np.full(self.net.n, eps)
                if not self._run(solver_name, opts, failures):
                    return None
                sampled.append(self._extract_duals())
        except DispatchError:
            return None
        finally:
            self._eps_load.value = np.zeros(self.net.n)
        e0, e1 = _REFINE_EPS
        w = e0 / (e0 - e1)  # linear extrapolation to eps = 0
        return tuple((1 - w) * a + w * b for a, b in zip(sampled[0], sampled[1]))

    def _assemble(self, S_vec, primal, duals, solver_name) -> DispatchSolution:
        net = self.net
        g, d, u, p = primal

        J = 0.0
        for t in range(2):
            J += float(net.gen_a[:, t] @ g[:, t] ** 2 + net.gen_b[:, t] @ g[:, t])
            J -= float(net.util_c[:, t] @ d[:, t] - net.util_q[:, t] @ d[:, t] ** 2)

        kkt = self._residuals(S_vec, primal, duals)
        return DispatchSolution(
            n=net.n, S=S_vec.copy(), g=g, d=d, u=u, p=p, J=J,
            lambda1=duals[0], lambda2=duals[1], mu=duals[3],
            storage_duals=duals[4], kkt=kkt, solver=solver_name,
        )

    def _residuals(self, S_vec, primal, duals) -> KKTResiduals:
        net = self.net
        g, d, u, p = primal
        lambda1, lambda2, nu, mu, storage_duals, g_lo, g_hi, d_lo, d_hi = duals
        lam = np.column_stack([lambda1, lambda2])
        soc = u[:, 0] + u[:, 1]

        # primal feasibility
        inj_gap = np.empty((net.n, 2))
        inj_gap[:, 0] = p[:, 0] - (g[:, 0] - d[:, 0] - self._origin @ u[:, 0])
        inj_gap[:, 1] = p[:, 1] - (g[:, 1] - d[:, 1] - self._dest @ u[:, 1])
        primal_res = max(
            np.abs(inj_gap).max(),
            np.abs(p.sum(axis=0)).max(),
            float(np.maximum(net.H @ p - net.f_bar[:, None], 0).max()) if net.m else 0.0,
            np.maximum(-u[:, 0], 0).max(),
            np.maximum(u[:, 0] - S_vec, 0).max(),
            np.maximum(-soc, 0).max(),
            np.maximum(soc - S_vec, 0).max(),
            np.maximum(-g, 0).max(),
            np.maximum(g - net.gen_cap, 0).max(initial=0.0),
            np.maximum(-d, 0).max(),
            np.maximum(d - net.util_cap, 0).max(initial=0.0),
        )

        # stationarity with explicit bound duals, plus dual sign feasibility
        res_g = np.abs(2 * net.gen_a * g + net.gen_b - lam - g_lo + g_hi).max()
        res_d = np.abs(-(net.util_c - 2 * net.util_q * d) + lam - d_lo + d_hi).max()
        grad_p = lam + nu[None, :]
        if net.m:
            grad_p = grad_p + net.H.T @ mu
        res_p = np.abs(grad_p).max()
        soc_gap = storage_duals[:, 3] - storage_duals[:, 2]
        res_u1 = np.abs(self._origin.T @ lambda1
                        + storage_duals[:, 1] - storage_duals[:, 0] + soc_gap).max()
        res_u2 = np.abs(self._dest.T @ lambda2 + soc_gap).max()
        sign = max((np.maximum(-arr, 0.0).max() if arr.size else 0.0)
                   for arr in (mu, storage_duals, g_lo, g_hi, d_lo, d_hi))
        stationarity = max(res_g, res_d, res_p, res_u1, res_u2, sign)

        comp_terms = [
            np.abs(storage_duals[:, 0] * u[:, 0]).max(),
            np.abs(storage_duals[:, 1] * (S_vec - u[:, 0])).max(),
            np.abs(storage_duals[:, 2] * soc).max(),
            np.abs(storage_duals[:, 3] * (S_vec - soc)).max(),
            np.abs(g_lo * g).max(),
            np.abs(d_lo * d).max(),
        ]
        finite_gcap = np.isfinite(net.gen_cap)
        if finite_gcap.any():
            comp_terms.append(np.abs(g_hi[finite_gcap]
                                     * (net.gen_cap - g)[finite_gcap]).max())
        finite_dcap = np.isfinite(net.util_cap)
        if finite_dcap.any():
            comp_terms.append(np.abs(d_hi[finite_dcap]
                                     * (net.util_cap - d)[finite_dcap]).max())
        if net.m:
            comp_terms.append(np.abs(mu * (net.f_bar[:, None] - net.H @ p)).max())
        complementarity = max(comp_terms)
        return KKTResiduals(float(primal_res), float(stationarity),
                            float(complementarity))


def _as_route_vector(S, n: int) -> np.ndarray:
    if isinstance(S, RouteStorage):
        if S.n != n:
            raise DispatchError(f"storage sized for {S.n} buses, network has {n}")
        return np.asarray(S.values, dtype=float)
    arr = np.asarray(S, dtype=float)
    if arr.shape == (n, n):
        arr = arr.reshape(-1)
    if arr.shape != (n * n,):
        raise DispatchError(f"storage vector has shape {arr.shape}, expected ({n * n},)")
    if np.any(arr < -1e-12):
        raise DispatchError("storage capacities must be nonnegative")
    return np.maximum(arr, 0.0)


_solver_cache: "weakref.WeakKeyDictionary[PowerNetwork, DispatchSolver]" = (
    weakref.WeakKeyDictionary()
)
_cache_lock = threading.Lock()


def get_solver(net: PowerNetwork) -> DispatchSolver:
    """Shared compiled solver for a network (one compilation per network)."""
    with _cache_lock:
        solver = _solver_cache.get(net)
        if solver is None:
            solver = DispatchSolver(net)
            _solver_cache[net] = solver
        return solver


def solve_dispatch(net: PowerNetwork, S) -> DispatchSolution:
    """KKT-certified optimum of the two-period dispatch at storage profile S."""
    return get_solver(net).solve(S)


def lmp_spread(sol: DispatchSolution, route: tuple[int, int]) -> float:
    """Price spread earned by storage on a route: destination peak price minus
    origin off-peak price."""
    i, j = route
    route_index(i, j, sol.n)  # range check
    return float(sol.lambda2[j] - sol.lambda1[i])


def storage_value_gradient(net: PowerNetwork, S) -> np.ndarray:
    """Gradient of the dispatch cost with respect to per-route storage.

    Equals minus the positive part of each route's price spread; one dispatch
    solve. The finite-difference oracle cross-checks this identity.
    """
    sol = solve_dispatch(net, S)
    spread = sol.spread_matrix().reshape(-1)
    return -np.maximum(spread, 0.0)
