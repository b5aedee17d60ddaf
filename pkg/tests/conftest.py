import pytest

from evmarket import equilibrium as eq
from evmarket.scenario import corpus_paths, parse_scenario
from evmarket.twobus import REFERENCE, make_network, make_population


@pytest.fixture(scope="session")
def twobus_net():
    return make_network(REFERENCE)


@pytest.fixture(scope="session")
def twobus_pop():
    return make_population(REFERENCE)


@pytest.fixture(scope="session")
def corpus():
    """Parsed corpus scenarios keyed by name."""
    return {p.stem: parse_scenario(p) for p in corpus_paths()}


def population_kind(pop) -> str:
    if pop.has_commuters and pop.has_ondemand:
        return "hybrid"
    if pop.has_ondemand:
        return "ondemand"
    return "commuter"


class _ResultCache:
    """Session-wide cache of solver runs; several test modules and the
    acceptance suite reuse the same corpus solutions."""

    def __init__(self, corpus):
        self.corpus = corpus
        self._store: dict[tuple[str, str], eq.EquilibriumResult] = {}

    def get(self, name: str, concept: str) -> eq.EquilibriumResult:
        key = (name, concept)
        if key not in self._store:
            scn = self.corpus[name]
            kind = population_kind(scn.population)
            self._store[key] = eq.solve_concept(
                scn.network, scn.population, concept, kind)
        return self._store[key]


@pytest.fixture(scope="session")
def solved(corpus):
    return _ResultCache(corpus)
