"""Driver populations and their inconvenience-cost distributions.

Distributions are piecewise-linear CDFs over nonnegative inconvenience costs.
Mass not covered by the breakpoints ("dummy" drivers) sits at +infinity and
never participates, so ``finite_mass`` may be below 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .network import route_index


class DistributionError(ValueError):
    """Raised for malformed cost distributions or invalid queries."""


@dataclass(frozen=True, eq=False)
class CostDistribution:
    """Piecewise-linear CDF given by breakpoints (theta, cumulative mass).

    The CDF is 0 left of the first breakpoint, linear between breakpoints and
    right-continuous at jumps (repeated theta values encode an atom). The last
    cumulative mass is the finite participating mass (<= 1).
    """

    thetas: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        thetas = np.asarray(self.thetas, dtype=float).reshape(-1)
        masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if thetas.size == 0 or thetas.shape != masses.shape:
            raise DistributionError("breakpoints require matching theta and mass arrays")
        if np.any(np.diff(thetas) < 0):
            raise DistributionError("breakpoint thetas must be nondecreasing")
        if np.any(np.diff(masses) < 0):
            raise DistributionError("cumulative masses must be nondecreasing")
        if masses[0] < 0 or masses[-1] > 1 + 1e-12:
            raise DistributionError("cumulative masses must stay within [0, 1]")
        if thetas[0] < 0:
            raise DistributionError("inconvenience costs must be nonnegative")
        for arr, name in ((thetas, "thetas"), (masses, "masses")):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def uniform(cls, lo: float, hi: float, mass: float = 1.0) -> "CostDistribution":
        if hi <= lo:
            raise DistributionError("uniform distribution needs hi > lo")
        return cls(thetas=np.array([lo, hi]), masses=np.array([0.0, mass]))

    @classmethod
    def point(cls, theta: float, mass: float = 1.0) -> "CostDistribution":
        """All finite mass concentrated at a single inconvenience cost."""
        return cls(thetas=np.array([theta]), masses=np.array([mass]))

    @classmethod
    def empty(cls) -> "CostDistribution":
        return cls(thetas=np.array([0.0]), masses=np.array([0.0]))

    @property
    def finite_mass(self) -> float:
        return float(self.masses[-1])

    @property
    def theta_min(self) -> float:
        return float(self.thetas[0])

    @property
    def theta_max(self) -> float:
        return float(self.thetas[-1])

    def eval(self, theta: float) -> float:
        """CDF value F(theta); right-continuous at atoms."""
        th = self.thetas
        if theta < th[0]:
            return 0.0
        if theta >= th[-1]:
            return self.finite_mass
        idx = int(np.searchsorted(th, theta, side="right"))
        # side="right" skips past duplicate breakpoints, so th[idx] > theta
        t0, t1 = th[idx - 1], th[idx]
        m0, m1 = self.masses[idx - 1], self.masses[idx]
        if theta == t0:
            return float(m0)
        return float(m0 + (m1 - m0) * (theta - t0) / (t1 - t0))

    def inverse(self, q: float) -> float:
        """Smallest theta with F(theta) >= q; left endpoint on flat segments.

        Returns theta_min for q <= 0. Raises for q above the finite mass.
        """
        if q > self.finite_mass + 1e-12:
            raise DistributionError(
                f"quantile {q:.6g} exceeds finite mass {self.finite_mass:.6g}"
            )
        q = min(q, self.finite_mass)
        if q <= 0.0:
            return self.theta_min
        ms = self.masses
        idx = int(np.searchsorted(ms, q, side="left"))
        if ms[idx] == q or idx == 0:
            return float(self.thetas[idx])
        m0, m1 = ms[idx - 1], ms[idx]
        t0, t1 = self.thetas[idx - 1], self.thetas[idx]
        if m1 == m0 or t1 == t0:
            return float(t1)
        theta = min(float(t0 + (t1 - t0) * (q - m0) / (m1 - m0)), float(t1))
        if self.eval(theta) < q:
            # steep segments amplify interpolation roundoff; restore the
            # defining guarantee F(inverse(q)) >= q by a float bisection
            lo, hi = theta, float(t1)
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if self.eval(mid) >= q:
                    hi = mid
                else:
                    lo = mid
            theta = hi
        return theta

    def inverse_interval(self, q: float) -> tuple[float, float]:
        """Set-valued inverse: all thresholds consistent with participation q.

        Returns (lo, hi) with lo = -inf for q <= 0 and hi = +inf for
        q >= finite_mass; on flat CDF segments the interval spans the segment.
        """
        lo = -np.inf if q <= 1e-15 else self.inverse(q)
        if q >= self.finite_mass - 1e-15:
            return lo, np.inf
        # smallest theta with F(theta) > q
        ms = self.masses
        idx = int(np.searchsorted(ms, q, side="right"))
        if idx == 0:
            return lo, float(self.thetas[0])
        m0, m1 = ms[idx - 1], ms[idx]
        t0, t1 = self.thetas[idx - 1], self.thetas[idx]
        if q == m0 or t1 == t0:
            hi = float(t0)
        else:
            hi = float(t0 + (t1 - t0) * (q - m0) / (m1 - m0))
        return lo, hi

    def has_flat_at(self, q: float) -> bool:
        """True when the inverse at q is set-valued (atom in the population)."""
        lo, hi = self.inverse_interval(q)
        return np.isfinite(lo) and np.isfinite(hi) and hi - lo > 1e-12

    def quantile_midpoints(self, count: int) -> np.ndarray:
        """Thetas at quantiles (k - 0.5)/count of the finite mass, k = 1..count."""
        if count < 1:
            raise DistributionError("need at least one quantile")
        qs = (np.arange(count) + 0.5) / count * self.finite_mass
        return np.array([self.inverse(q) for q in qs])

    def integral_inverse(self, q: float) -> float:
        """Integral of the quantile function from 0 to q (participation cost)."""
        if q <= 0:
            return 0.0
        q = min(q, self.finite_mass)
        total = 0.0
        ms, th = self.masses, self.thetas
        prev_m = 0.0
        prev_t = th[0]
        for k in range(len(ms)):
            seg_m = min(ms[k], q)
            if seg_m > prev_m:
                # theta rises linearly from the quantile at prev_m to at seg_m
                t_lo = prev_t if k == 0 else self._theta_at(prev_m, k)
                t_hi = self._theta_at(seg_m, k)
                total += 0.5 * (t_lo + t_hi) * (seg_m - prev_m)
                prev_m = seg_m
            prev_t = th[k]
            if ms[k] >= q:
                break
        return float(total)

    def _theta_at(self, q: float, k: int) -> float:
        m0 = self.masses[k - 1] if k > 0 else 0.0
        m1 = self.masses[k]
        t0 = self.thetas[k - 1] if k > 0 else self.thetas[0]
        t1 = self.thetas[k]
        if m1 == m0:
            return float(t1)
        return float(t0 + (t1 - t0) * (q - m0) / (m1 - m0))


@dataclass(frozen=True, eq=False)
class DriverPopulation:
    """Commuter populations per route plus one network-wide on-demand pool.

    Commuters have an exogenous route and a shared degradation cost; on-demand
    drivers choose any route and face route-specific travel costs. Either
    sub-population may be empty.
    """

    n: int
    commuter: Mapping[tuple[int, int], CostDistribution]
    commuter_kappa: float = 0.0
    ondemand: CostDistribution | None = None
    ondemand_kappa: np.ndarray | None = None

    def __post_init__(self):
        if self.commuter_kappa < 0:
            raise DistributionError("commuter degradation cost must be nonnegative")
        commuter = dict(self.commuter)
        for (i, j) in commuter:
            route_index(i, j, self.n)  # range check
        object.__setattr__(self, "commuter", commuter)
        if (self.ondemand is None) != (self.ondemand_kappa is None):
            raise DistributionError(
                "on-demand population needs both a distribution and a route-cost matrix"
            )
        if self.ondemand_kappa is not None:
            kap = np.ascontiguousarray(np.asarray(self.ondemand_kappa, dtype=float))
            if kap.shape != (self.n, self.n):
                raise DistributionError(
                    f"route-cost matrix has shape {kap.shape}, expected {(self.n, self.n)}"
                )
            if np.any(kap < 0):
                raise DistributionError("route costs must be nonnegative")
            kap.setflags(write=False)
            object.__setattr__(self, "ondemand_kappa", kap)

    @property
    def has_commuters(self) -> bool:
        return any(d.finite_mass > 0 for d in self.commuter.values())

    @property
    def has_ondemand(self) -> bool:
        return self.ondemand is not None and self.ondemand.finite_mass > 0

    def commuter_routes(self) -> list[tuple[int, int]]:
        """Routes with positive commuter mass, lexicographic order."""
        return sorted((i, j) for (i, j), d in self.commuter.items() if d.finite_mass > 0)

    def commuter_only(self) -> "DriverPopulation":
        return DriverPopulation(n=self.n, commuter=self.commuter,
                                commuter_kappa=self.commuter_kappa)

    def ondemand_only(self) -> "DriverPopulation":
        return DriverPopulation(n=self.n, commuter={}, commuter_kappa=0.0,
                                ondemand=self.ondemand,
                                ondemand_kappa=self.ondemand_kappa)


def cdf_eval(dist: CostDistribution, theta: float) -> float:
    """Participating mass with inconvenience cost at or below theta."""
    return dist.eval(theta)


def cdf_inverse(dist: CostDistribution, q: float) -> float:
    """Smallest theta whose CDF reaches q (left-inverse on flat segments)."""
    return dist.inverse(q)


def supply_from_threshold(
    pop: DriverPopulation,
    thresholds_fix: np.ndarray | None = None,
    threshold_flex: float | None = None,
) -> tuple[np.ndarray, float]:
    """Aggregate storage supplied at the given participation thresholds.

    ``thresholds_fix`` is an (n, n) matrix of per-route commuter thresholds;
    ``threshold_flex`` the scalar on-demand threshold. Returns the commuter
    supply matrix and the total on-demand mass (routing of that mass is a
    solver concern, not a population property).
    """
    n = pop.n
    S_fix = np.zeros((n, n))
    if thresholds_fix is not None:
        thr = np.asarray(thresholds_fix, dtype=float)
        for (i, j), dist in pop.commuter.items():
            S_fix[i, j] = dist.eval(thr[i, j])
    flex_total = 0.0
    if threshold_flex is not None and pop.ondemand is not None:
        flex_total = pop.ondemand.eval(float(threshold_flex))
    return S_fix, flex_total
