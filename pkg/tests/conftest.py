import numpy as np
import pytest

from epinet.epidemic import SimParams, SimState
from epinet.interventions import NpiTable
from epinet.synthpop import Population, PopulationConfig, build_population


def micro_population(ages, household_id, workgroup_id=None, class_id=None,
                     grade_id=None, school_id=None, cluster_id=None,
                     neighborhood_id=None, sc_parent=None) -> Population:
    """Hand-built population for fixtures: one community, explicit contexts."""
    n = len(ages)
    ages = np.asarray(ages, dtype=np.int64)
    household_id = np.asarray(household_id, dtype=np.int64)
    sizes = np.bincount(household_id)

    def arr(x, fill):
        if x is None:
            return np.full(n, fill, dtype=np.int64)
        return np.asarray(x, dtype=np.int64)

    return Population(
        config=PopulationConfig(n_agents=max(n, 50)),
        ages=ages,
        life_expectancy=np.full(n, 82.5),
        household_id=household_id,
        household_size=sizes[household_id],
        cluster_id=arr(cluster_id, 0),
        neighborhood_id=arr(neighborhood_id, 0),
        community_id=np.zeros(n, dtype=np.int64),
        workgroup_id=arr(workgroup_id, -1),
        class_id=arr(class_id, -1),
        grade_id=arr(grade_id, -1),
        school_id=arr(school_id, -1),
        sc_parent=np.zeros(n, dtype=bool) if sc_parent is None else np.asarray(sc_parent, bool),
    )


@pytest.fixture(scope="session")
def town() -> Population:
    return build_population(PopulationConfig(n_agents=2393, rng_seed=20393))


@pytest.fixture(scope="session")
def small_town() -> Population:
    return build_population(PopulationConfig(n_agents=400, rng_seed=7))


@pytest.fixture()
def mixed_fixture():
    """10-agent fixture: two households in one cluster, workgroup and school.

    Agents 0-3 are household 0 (adults 0,1; children 2,3); agents 4-9 are
    household 1 (adults 4,5; children 6-9). Adults 0,1,4,5 share a working
    group; children 2,3,6,7 share a class, 8,9 only the grade/school.
    """
    ages = [35, 40, 10, 8, 50, 30, 12, 15, 9, 6]
    household_id = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
    workgroup_id = [0, 0, -1, -1, 0, 0, -1, -1, -1, -1]
    class_id = [-1, -1, 0, 0, -1, -1, 0, 0, 1, 1]
    grade_id = [-1, -1, 0, 0, -1, -1, 0, 0, 0, 0]
    school_id = [-1, -1, 0, 0, -1, -1, 0, 0, 0, 0]
    pop = micro_population(ages, household_id, workgroup_id, class_id,
                           grade_id, school_id)
    return pop


def fresh_state(pop, rng_seed=0, npi_table=None, vax=None, **kw) -> SimState:
    return SimState(pop, SimParams(), npi_table, vax,
                    np.random.default_rng(rng_seed), **kw)
