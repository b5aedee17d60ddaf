"""Scenario files: parsing, strict validation, and the shipped corpus.

A scenario is a YAML document (conventionally ``.scn``) with the sections
``buses``, ``lines`` (or ``shift_factors`` + ``line_limits``), ``costs``,
``utilities`` and optionally ``population``. Bus ids and periods are 1-based
in files; matrices are row-major. Unknown keys are rejected so that a typo in
a cost matrix cannot silently change a study. The exact schema is documented
in the repository README.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .drivers import CostDistribution, DriverPopulation
from .network import (CostSpec, NetworkError, PowerNetwork, UtilitySpec,
                      build_shift_factors, validate_network)


class ScenarioError(ValueError):
    """Structured parse/validation failure, message carries the location."""


@dataclass
class ParsedScenario:
    network: PowerNetwork
    population: DriverPopulation
    warnings: list[str] = field(default_factory=list)
    name: str = ""
    path: str = ""

    def __iter__(self):
        # allow: net, pop = parse_scenario(path)
        yield self.network
        yield self.population


_TOP_KEYS = {"name", "description", "base", "buses", "slack_bus", "lines",
             "shift_factors", "line_limits", "costs", "utilities", "population"}
_LINE_KEYS = {"from", "to", "reactance", "limit"}
_COST_KEYS = {"bus", "period", "a", "b", "cap"}
_UTIL_KEYS = {"bus", "period", "c", "q", "cap"}
_POP_KEYS = {"commuter", "ondemand"}
_COMMUTER_KEYS = {"kappa", "routes", "default"}
_COMMUTER_ROUTE_KEYS = {"from", "to", "distribution"}
_ONDEMAND_KEYS = {"distribution", "kappa"}
_DIST_KEYS = {"uniform", "point", "breakpoints", "mass"}


def _check_keys(mapping: dict, allowed: set, where: str) -> None:
    if not isinstance(mapping, dict):
        raise ScenarioError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}; allowed {sorted(allowed)}")


def _number(value, where: str, minimum: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {value!r}")
    out = float(value)
    if minimum is not None and out < minimum:
        raise ScenarioError(f"{where}: value {out} below minimum {minimum}")
    return out


def _bus(value, n: int, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{where}: expected a 1-based bus id, got {value!r}")
    if not (1 <= value <= n):
        raise ScenarioError(f"{where}: bus {value} out of range 1..{n}")
    return value - 1


def _periods(value, where: str) -> list[int]:
    if value == "all" or value == [1, 2]:
        return [0, 1]
    if value in (1, 2):
        return [value - 1]
    raise ScenarioError(f"{where}: period must be 1, 2 or 'all', got {value!r}")


def parse_distribution(spec, where: str) -> CostDistribution:
    """Distribution forms: {uniform: [lo, hi]}, {point: theta},
    {breakpoints: [[theta, cumulative], ...]}; uniform/point accept ``mass``."""
    _check_keys(spec, _DIST_KEYS, where)
    forms = [k for k in ("uniform", "point", "breakpoints") if k in spec]
    if len(forms) != 1:
        raise ScenarioError(f"{where}: need exactly one of uniform/point/breakpoints")
    mass = _number(spec.get("mass", 1.0), f"{where}.mass", minimum=0.0)
    if mass > 1.0:
        raise ScenarioError(f"{where}.mass: {mass} exceeds the normalized total 1")
    try:
        if forms[0] == "uniform":
            bounds = spec["uniform"]
            if not isinstance(bounds, list) or len(bounds) != 2:
                raise ScenarioError(f"{where}.uniform: expected [lo, hi]")
            lo = _number(bounds[0], f"{where}.uniform[0]", minimum=0.0)
            hi = _number(bounds[1], f"{where}.uniform[1]")
            return CostDistribution.uniform(lo, hi, mass=mass)
        if forms[0] == "point":
            theta = _number(spec["point"], f"{where}.point", minimum=0.0)
            return CostDistribution.point(theta, mass=mass)
        if "mass" in spec:
            raise ScenarioError(f"{where}: breakpoints carry masses; drop the mass key")
        pts = spec["breakpoints"]
        if not isinstance(pts, list) or not all(
                isinstance(p, list) and len(p) == 2 for p in pts):
            raise ScenarioError(f"{where}.breakpoints: expected [[theta, cumulative], ...]")
        thetas = [_number(p[0], f"{where}.breakpoints.theta", minimum=0.0) for p in pts]
        masses = [_number(p[1], f"{where}.breakpoints.cumulative", minimum=0.0) for p in pts]
        return CostDistribution(thetas=np.array(thetas), masses=np.array(masses))
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def _parse_network(doc: dict, warnings: list[str]) -> PowerNetwork:
    if "buses" not in doc:
        raise ScenarioError("missing required key 'buses'")
    n = doc["buses"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ScenarioError(f"buses: expected a positive integer, got {n!r}")

    has_lines = "lines" in doc
    has_H = "shift_factors" in doc
    if not has_lines and not has_H:
        raise ScenarioError("need one of 'lines' or 'shift_factors'")
    if "line_limits" in doc and not has_H:
        raise ScenarioError("'line_limits' only accompanies 'shift_factors'")

    if has_H:
        if has_lines:
            warnings.append(
                "both 'lines' and 'shift_factors' given; shift_factors win")
        if "line_limits" not in doc:
            raise ScenarioError("'shift_factors' requires 'line_limits'")
        H = np.asarray(doc["shift_factors"], dtype=float)
        if H.size == 0:
            H = H.reshape(0, n)
        if H.ndim != 2 or H.shape[1] != n:
            raise ScenarioError(
                f"shift_factors: expected rows of length {n}, got shape {H.shape}")
        f_bar = np.asarray(doc["line_limits"], dtype=float).reshape(-1)
        if f_bar.shape[0] != H.shape[0]:
            raise ScenarioError(
                f"line_limits: {f_bar.shape[0]} entries for {H.shape[0]} shift-factor rows")
        if "slack_bus" in doc:
            warnings.append("'slack_bus' is ignored when shift_factors are given")
    else:
        slack = _bus(doc.get("slack_bus", 1), n, "slack_bus")
        lines = doc["lines"]
        if not isinstance(lines, list) or not lines:
            raise ScenarioError("lines: expected a non-empty list")
        edges, limits = [], []
        for k, line in enumerate(lines):
            where = f"lines[{k}]"
            _check_keys(line, _LINE_KEYS, where)
            for req in ("from", "to", "reactance", "limit"):
                if req not in line:
                    raise ScenarioError(f"{where}: missing '{req}'")
            i = _bus(line["from"], n, f"{where}.from")
            j = _bus(line["to"], n, f"{where}.to")
            x = _number(line["reactance"], f"{where}.reactance")
            lim = _number(line["limit"], f"{where}.limit")
            edges.append((i, j, x))
            limits.append(lim)
        try:
            H_fwd = build_shift_factors(edges, n=n, slack_bus=slack)
        except NetworkError as exc:
            raise ScenarioError(f"lines: {exc}") from exc
        # monitor both flow directions of every listed line
        H = np.vstack([H_fwd, -H_fwd]) if H_fwd.size else H_fwd.reshape(0, n)
        f_bar = np.array(limits + limits, dtype=float)

    costs: dict[tuple[int, int], CostSpec] = {}
    for k, entry in enumerate(doc.get("costs", [])):
        where = f"costs[{k}]"
        _check_keys(entry, _COST_KEYS, where)
        if "bus" not in entry or "period" not in entry:
            raise ScenarioError(f"{where}: requires 'bus' and 'period'")
        i = _bus(entry["bus"], n, f"{where}.bus")
        for t in _periods(entry["period"], f"{where}.period"):
            if (i, t) in costs:
                raise ScenarioError(f"{where}: duplicate cost for bus {i + 1} period {t + 1}")
            cap = entry.get("cap")
            costs[(i, t)] = CostSpec(
                a=_number(entry.get("a", 0.0), f"{where}.a"),
                b=_number(entry.get("b", 0.0), f"{where}.b"),
                cap=None if cap is None else _number(cap, f"{where}.cap"),
            )
    utilities: dict[tuple[int, int], UtilitySpec] = {}
    for k, entry in enumerate(doc.get("utilities", [])):
        where = f"utilities[{k}]"
        _check_keys(entry, _UTIL_KEYS, where)
        if "bus" not in entry or "period" not in entry:
            raise ScenarioError(f"{where}: requires 'bus' and 'period'")
        i = _bus(entry["bus"], n, f"{where}.bus")
        for t in _periods(entry["period"], f"{where}.period"):
            if (i, t) in utilities:
                raise ScenarioError(
                    f"{where}: duplicate utility for bus {i + 1} period {t + 1}")
            cap = entry.get("cap")
            utilities[(i, t)] = UtilitySpec(
                c=_number(entry.get("c", 0.0), f"{where}.c"),
                q=_number(entry.get("q", 0.0), f"{where}.q"),
                cap=None if cap is None else _number(cap, f"{where}.cap"),
            )

    base = doc.get("base")
    return PowerNetwork.from_specs(
        n=n, H=H, f_bar=f_bar, costs=costs, utilities=utilities,
        base=None if base is None else _number(base, "base", minimum=0.0),
        name=str(doc.get("name", "")),
    )


def _parse_population(doc: dict, n: int) -> DriverPopulation:
    block = doc.get("population", {}) or {}
    _check_keys(block, _POP_KEYS, "population")
    commuter: dict[tuple[int, int], CostDistribution] = {}
    kappa = 0.0
    if "commuter" in block:
        sub = block["commuter"]
        _check_keys(sub, _COMMUTER_KEYS, "population.commuter")
        if "kappa" not in sub:
            raise ScenarioError("population.commuter: requires 'kappa'")
        kappa = _number(sub["kappa"], "population.commuter.kappa", minimum=0.0)
        for k, entry in enumerate(sub.get("routes", [])):
            where = f"population.commuter.routes[{k}]"
            _check_keys(entry, _COMMUTER_ROUTE_KEYS, where)
            for req in ("from", "to", "distribution"):
                if req not in entry:
                    raise ScenarioError(f"{where}: missing '{req}'")
            i = _bus(entry["from"], n, f"{where}.from")
            j = _bus(entry["to"], n, f"{where}.to")
            if (i, j) in commuter:
                raise ScenarioError(f"{where}: duplicate route ({i + 1},{j + 1})")
            commuter[(i, j)] = parse_distribution(entry["distribution"],
                                                  f"{where}.distribution")
        if "default" in sub:
            default = parse_distribution(sub["default"], "population.commuter.default")
            for i in range(n):
                for j in range(n):
                    commuter.setdefault((i, j), default)

    ondemand = None
    ondemand_kappa = None
    if "ondemand" in block:
        sub = block["ondemand"]
        _check_keys(sub, _ONDEMAND_KEYS, "population.ondemand")
        for req in ("distribution", "kappa"):
            if req not in sub:
                raise ScenarioError(f"population.ondemand: missing '{req}'")
        ondemand = parse_distribution(sub["distribution"],
                                      "population.ondemand.distribution")
        kap = np.asarray(sub["kappa"], dtype=float)
        if kap.shape != (n, n):
            raise ScenarioError(
                f"population.ondemand.kappa: expected {n}x{n} route-cost matrix, "
                f"got shape {kap.shape}")
        ondemand_kappa = kap

    try:
        return DriverPopulation(
            n=n, commuter=commuter, commuter_kappa=kappa,
            ondemand=ondemand, ondemand_kappa=ondemand_kappa,
        )
    except ValueError as exc:
        raise ScenarioError(f"population: {exc}") from exc


def parse_scenario(path, validate: bool = True) -> ParsedScenario:
    """Load and validate a scenario file into domain objects.

    Raises ScenarioError with the offending location for schema problems and,
    when ``validate`` is set, for violated network invariants (warnings such
    as potential unboundedness are collected, not raised).
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: YAML parse error: {exc}") from exc
    if doc is None:
        raise ScenarioError(f"{path}: empty scenario")
    _check_keys(doc, _TOP_KEYS, str(path))

    warnings: list[str] = []
    try:
        net = _parse_network(doc, warnings)
    except NetworkError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    pop = _parse_population(doc, net.n)

    report = validate_network(net)
    warnings.extend(f"[{issue.code}] {issue.message}" for issue in report.warnings)
    if validate and not report.ok:
        detail = "; ".join(f"[{i.code}] {i.message}" for i in report.errors)
        raise ScenarioError(f"{path}: invalid network: {detail}")
    return ParsedScenario(network=net, population=pop, warnings=warnings,
                          name=str(doc.get("name", path.stem)), path=str(path))


def packaged_scenario_dir() -> Path:
    """Directory of the scenarios shipped with the package."""
    return Path(resources.files("evmarket") / "scenarios")


def corpus_paths() -> list[Path]:
    """Shipped scenario files, sorted by name."""
    return sorted(packaged_scenario_dir().glob("*.scn"))
