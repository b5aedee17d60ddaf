"""Transmission network model: buses, shift factors, costs and utilities.

Conventions used throughout the package:

* Buses are indexed 0..n-1 internally; scenario files and CLI output use
  1-based bus ids.
* Time periods are 0 (off-peak) and 1 (peak) internally, 1 and 2 externally.
* Routes are ordered origin-major: route ``r = i * n + j`` moves storage from
  bus ``i`` (charged in period 0) to bus ``j`` (discharged in period 1).
  Same-bus routes ``i -> i`` are included.
* All quantities are per-unit after normalization; an optional ``base`` is
  carried for reporting only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class NetworkError(ValueError):
    """Raised for malformed network inputs (topology, shapes, signs)."""


def route_index(i: int, j: int, n: int) -> int:
    """Flat index of route i -> j in the origin-major route vector."""
    if not (0 <= i < n and 0 <= j < n):
        raise NetworkError(f"route ({i}, {j}) out of range for {n} buses")
    return i * n + j


def route_pair(r: int, n: int) -> tuple[int, int]:
    """Inverse of :func:`route_index`."""
    return divmod(r, n)


@dataclass(frozen=True)
class CostSpec:
    """Generation cost a*g^2 + b*g on [0, cap]. cap=None means uncapped."""

    a: float = 0.0
    b: float = 0.0
    cap: float | None = None

    def value(self, g: float) -> float:
        return self.a * g * g + self.b * g

    def marginal(self, g: float) -> float:
        return 2.0 * self.a * g + self.b

    def max_marginal(self) -> float:
        """Largest marginal cost over the feasible output range."""
        if self.cap is None:
            return np.inf if self.a > 0 else self.b
        return 2.0 * self.a * self.cap + self.b


@dataclass(frozen=True)
class UtilitySpec:
    """Load utility c*d - q*d^2 on [0, cap]; concave requires q >= 0."""

    c: float = 0.0
    q: float = 0.0
    cap: float | None = None

    def value(self, d: float) -> float:
        return self.c * d - self.q * d * d

    def marginal(self, d: float) -> float:
        return self.c - 2.0 * self.q * d


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """Immutable network description.

    ``H`` maps balanced nodal injections to monitored line flows; ``f_bar``
    holds the corresponding flow limits. Generation cost and load utility are
    quadratic per bus and period; absent generators/loads are encoded with a
    zero cap. Immutable after construction, safe to share across solver runs.
    """

    n: int
    H: np.ndarray
    f_bar: np.ndarray
    gen_a: np.ndarray
    gen_b: np.ndarray
    gen_cap: np.ndarray
    util_c: np.ndarray
    util_q: np.ndarray
    util_cap: np.ndarray
    base: float | None = None
    name: str = ""

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if H.size == 0:
            H = H.reshape(0, self.n)
        f_bar = np.asarray(self.f_bar, dtype=float).reshape(-1)
        if H.shape[1] != self.n:
            raise NetworkError(f"H has {H.shape[1]} columns, expected {self.n}")
        if f_bar.shape[0] != H.shape[0]:
            raise NetworkError(
                f"f_bar has {f_bar.shape[0]} entries for {H.shape[0]} constraints"
            )
        for attr, arr in (
            ("H", H),
            ("f_bar", f_bar),
            ("gen_a", self._grid(self.gen_a)),
            ("gen_b", self._grid(self.gen_b)),
            ("gen_cap", self._grid(self.gen_cap)),
            ("util_c", self._grid(self.util_c)),
            ("util_q", self._grid(self.util_q)),
            ("util_cap", self._grid(self.util_cap)),
        ):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)

    def _grid(self, arr) -> np.ndarray:
        out = np.asarray(arr, dtype=float)
        if out.shape != (self.n, 2):
            raise NetworkError(f"per-bus/per-period array has shape {out.shape}, expected {(self.n, 2)}")
        return out

    @property
    def m(self) -> int:
        """Number of monitored transmission constraints."""
        return self.H.shape[0]

    @property
    def n_routes(self) -> int:
        return self.n * self.n

    @classmethod
    def from_specs(
        cls,
        n: int,
        H: np.ndarray,
        f_bar: np.ndarray,
        costs: Mapping[tuple[int, int], CostSpec],
        utilities: Mapping[tuple[int, int], UtilitySpec],
        base: float | None = None,
        name: str = "",
    ) -> "PowerNetwork":
        """Build from sparse (bus, period) -> spec mappings, 0-based indices."""
        gen_a = np.zeros((n, 2))
        gen_b = np.zeros((n, 2))
        gen_cap = np.zeros((n, 2))  # no generator = cap 0
        util_c = np.zeros((n, 2))
        util_q = np.zeros((n, 2))
        util_cap = np.zeros((n, 2))
        for (i, t), spec in costs.items():
            if not (0 <= i < n) or t not in (0, 1):
                raise NetworkError(f"cost spec at invalid (bus, period) ({i}, {t})")
            gen_a[i, t] = spec.a
            gen_b[i, t] = spec.b
            gen_cap[i, t] = np.inf if spec.cap is None else spec.cap
        for (i, t), spec in utilities.items():
            if not (0 <= i < n) or t not in (0, 1):
                raise NetworkError(f"utility spec at invalid (bus, period) ({i}, {t})")
            util_c[i, t] = spec.c
            util_q[i, t] = spec.q
            util_cap[i, t] = np.inf if spec.cap is None else spec.cap
        return cls(
            n=n, H=H, f_bar=f_bar,
            gen_a=gen_a, gen_b=gen_b, gen_cap=gen_cap,
            util_c=util_c, util_q=util_q, util_cap=util_cap,
            base=base, name=name,
        )

    def cost_spec(self, bus: int, period: int) -> CostSpec | None:
        cap = self.gen_cap[bus, period]
        if cap == 0.0 and self.gen_a[bus, period] == 0.0 and self.gen_b[bus, period] == 0.0:
            return None
        return CostSpec(
            a=self.gen_a[bus, period],
            b=self.gen_b[bus, period],
            cap=None if np.isinf(cap) else float(cap),
        )

    def utility_spec(self, bus: int, period: int) -> UtilitySpec | None:
        cap = self.util_cap[bus, period]
        if cap == 0.0 and self.util_c[bus, period] == 0.0 and self.util_q[bus, period] == 0.0:
            return None
        return UtilitySpec(
            c=self.util_c[bus, period],
            q=self.util_q[bus, period],
            cap=None if np.isinf(cap) else float(cap),
        )


@dataclass(frozen=True, eq=False)
class RouteStorage:
    """Aggregate mobile storage capacity per route, origin-major flat vector.

    Entries are normalized per-route capacities in [0, 1]; entry
    ``values[i * n + j]`` is the capacity moving from bus i to bus j.
    """

    n: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=float).reshape(-1))
        if vals.shape[0] != self.n * self.n:
            raise NetworkError(
                f"route vector has {vals.shape[0]} entries, expected {self.n * self.n}"
            )
        if np.any(vals < -1e-12):
            raise NetworkError("route storage capacities must be nonnegative")
        vals = np.maximum(vals, 0.0)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, n: int) -> "RouteStorage":
        return cls(n=n, values=np.zeros(n * n))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RouteStorage":
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise NetworkError("route storage matrix must be square")
        return cls(n=M.shape[0], values=M.reshape(-1))

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(self.n, self.n).copy()

    def get(self, i: int, j: int) -> float:
        return float(self.values[route_index(i, j, self.n)])

    def total(self) -> float:
        return float(self.values.sum())

    def validate(self) -> list[str]:
        """Normalization check: capacities within [0, 1] per route."""
        issues = []
        if np.any(self.values > 1.0 + 1e-9):
            worst = int(np.argmax(self.values))
            i, j = route_pair(worst, self.n)
            issues.append(
                f"route ({i + 1},{j + 1}) capacity {self.values[worst]:.6g} exceeds normalized bound 1"
            )
        return issues


def build_shift_factors(
    edges: Sequence[tuple[int, int, float]],
    n: int,
    slack_bus: int = 0,
) -> np.ndarray:
    """Shift-factor matrix for a DC power flow, one row per edge.

    ``edges`` lists (from_bus, to_bus, reactance) with 0-based buses; the row
    for edge (i, j) gives the flow in the i -> j direction per unit of
    balanced injection. The slack-bus column is identically zero: an
    injection vector p with sum(p) = 0 yields flows H @ p independent of the
    slack choice.
    """
    if n < 1:
        raise NetworkError("need at least one bus")
    if not (0 <= slack_bus < n):
        raise NetworkError(f"slack bus {slack_bus} out of range for {n} buses")
    edges = list(edges)
    for (i, j, x) in edges:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise NetworkError(f"edge ({i}, {j}) invalid for {n} buses")
        if x <= 0:
            raise NetworkError(f"edge ({i}, {j}) has nonpositive reactance {x}")
    if n == 1:
        return np.zeros((len(edges), 1))

    # connectivity via union-find
    parent = list(range(n))

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for (i, j, _) in edges:
        parent[find(i)] = find(j)
    roots = {find(k) for k in range(n)}
    if len(roots) > 1:
        raise NetworkError(f"network is disconnected ({len(roots)} components)")

    # nodal susceptance matrix, slack row/column removed
    B = np.zeros((n, n))
    for (i, j, x) in edges:
        w = 1.0 / x
        B[i, i] += w
        B[j, j] += w
        B[i, j] -= w
        B[j, i] -= w
    keep = [k for k in range(n) if k != slack_bus]
    B_red = B[np.ix_(keep, keep)]
    B_inv = np.zeros((n, n))
    B_inv[np.ix_(keep, keep)] = np.linalg.inv(B_red)

    H = np.zeros((len(edges), n))
    for row, (i, j, x) in enumerate(edges):
        H[row, :] = (B_inv[i, :] - B_inv[j, :]) / x
    return H


@dataclass(frozen=True)
class ValidationIssue:
    severity: str  # "error" | "warning"
    code: str
    message: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def errors(self) -> list[ValidationIssue]:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def warnings(self) -> list[ValidationIssue]:
        return [i for i in self.issues if i.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def add(self, severity: str, code: str, message: str) -> None:
        self.issues.append(ValidationIssue(severity, code, message))

    def __str__(self) -> str:
        if not self.issues:
            return "valid: no issues"
        return "\n".join(f"{i.severity}: [{i.code}] {i.message}" for i in self.issues)


def validate_network(net: PowerNetwork) -> ValidationReport:
    """Check model invariants; returns a report instead of raising.

    Errors invalidate the scenario; warnings flag dispatches that may be
    unbounded (uncapped linear utility with no generator able to price it out).
    """
    report = ValidationReport()
    if np.any(net.gen_a < 0):
        bad = np.argwhere(net.gen_a < 0)[0]
        report.add("error", "cost-convexity",
                   f"generation cost at bus {bad[0] + 1} period {bad[1] + 1} has a < 0")
    if np.any(net.util_q < 0):
        bad = np.argwhere(net.util_q < 0)[0]
        report.add("error", "utility-concavity",
                   f"load utility at bus {bad[0] + 1} period {bad[1] + 1} has curvature < 0")
    if np.any(net.gen_cap < 0) or np.any(net.util_cap < 0):
        report.add("error", "negative-cap", "generation/demand caps must be nonnegative")
    if net.f_bar.size and np.any(net.f_bar <= 0):
        bad = int(np.argmin(net.f_bar))
        report.add("error", "line-capacity",
                   f"line constraint {bad + 1} has nonpositive capacity {net.f_bar[bad]:.6g}")
    if net.H.shape != (net.m, net.n):
        report.add("error", "shape", f"H has shape {net.H.shape}, expected {(net.m, net.n)}")

    # Boundedness: a linear uncapped utility needs some generator in the same
    # period whose marginal cost can reach its marginal utility.
    for t in range(2):
        max_marginal = 0.0
        for i in range(net.n):
            spec = net.cost_spec(i, t)
            if spec is not None:
                max_marginal = max(max_marginal, spec.max_marginal())
        for i in range(net.n):
            spec = net.utility_spec(i, t)
            if spec is None or spec.cap is not None or spec.q > 0:
                continue
            if spec.c > max_marginal:
                report.add(
                    "warning", "unbounded",
                    f"uncapped linear utility c={spec.c:.6g} at bus {i + 1} period {t + 1} "
                    f"exceeds every generator's marginal cost (max {max_marginal:.6g}); "
                    "dispatch may be unbounded",
                )
    return report
