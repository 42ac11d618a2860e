import json

import numpy as np
import pytest
from scipy import stats

from epinet.synthpop import (AGE_GROUP_EDGES, ContextKind, PopulationConfig,
                             attack_rate_weighted_index_case, build_population,
                             generate_population, load_population,
                             save_population, validate_population)

ATTACK = [0.068, 0.173, 0.140, 0.461, 0.157]


def test_generate_population_town_scale(town):
    assert town.n_agents == 2393
    validate_population(town)


def test_population_size_exact_with_truncation():
    pop = build_population(PopulationConfig(n_agents=101, rng_seed=3))
    assert pop.n_agents == 101
    sizes = np.bincount(pop.household_id)
    assert sizes.min() >= 1 and sizes.max() <= 6


def test_contexts_partition_their_domains(small_town):
    pop = small_town
    # night contexts cover everyone exactly once
    for ids in (pop.household_id, pop.cluster_id, pop.neighborhood_id, pop.community_id):
        assert (ids >= 0).all()
    # day contexts: adults 19-64 work, children 5-18 school, never both
    workers = pop.workgroup_id >= 0
    students = pop.class_id >= 0
    assert not (workers & students).any()
    assert (pop.ages[workers] >= 19).all() and (pop.ages[workers] <= 64).all()
    assert (pop.ages[students] >= 5).all() and (pop.ages[students] <= 18).all()
    # class subset of grade subset of school
    for c in np.unique(pop.class_id[students]):
        in_class = pop.class_id == c
        assert len(np.unique(pop.grade_id[in_class])) == 1
        assert len(np.unique(pop.school_id[in_class])) == 1


def test_fifty_agents_all_size_two_households():
    cfg = PopulationConfig(n_agents=50, household_size_distribution={2: 1.0},
                           rng_seed=1)
    agents, contexts = generate_population(cfg)
    assert len(agents) == 50
    households = [c for c in contexts if c.kind is ContextKind.HOUSEHOLD]
    assert len(households) == 25
    assert all(len(h.members) == 2 for h in households)
    # every agent in exactly 4 night contexts
    for a in agents:
        assert len(a.home_contexts) == 4


def test_determinism_same_seed_identical():
    cfg = PopulationConfig(n_agents=300, rng_seed=42)
    a = build_population(cfg)
    b = build_population(cfg)
    for name in ("ages", "household_id", "cluster_id", "workgroup_id", "class_id",
                 "neighborhood_id", "sc_parent"):
        assert (getattr(a, name) == getattr(b, name)).all()


def test_different_seed_same_aggregates():
    a = build_population(PopulationConfig(n_agents=5000, rng_seed=1))
    b = build_population(PopulationConfig(n_agents=5000, rng_seed=2))
    assert a.n_agents == b.n_agents
    # age means agree within sampling noise
    se = np.sqrt(a.ages.var() / 5000 + b.ages.var() / 5000)
    assert abs(a.ages.mean() - b.ages.mean()) < 4 * se


def test_age_histogram_matches_distribution():
    cfg = PopulationConfig(n_agents=10_000, rng_seed=5)
    pop = build_population(cfg)
    expected = cfg.resolved_age_distribution() * pop.n_agents
    observed = np.bincount(pop.ages, minlength=len(expected))
    keep = expected >= 5  # chi-square validity
    chi2 = float(np.sum((observed[keep] - expected[keep]) ** 2 / expected[keep]))
    p = stats.chi2.sf(chi2, keep.sum() - 1)
    assert p > 0.01


def test_rejects_tiny_or_degenerate_configs():
    with pytest.raises(ValueError):
        build_population(PopulationConfig(n_agents=49))
    with pytest.raises(ValueError):
        build_population(PopulationConfig(n_agents=100, class_size=0))
    with pytest.raises(ValueError):
        build_population(PopulationConfig(n_agents=100, workgroup_size=0))
    with pytest.raises(ValueError):
        PopulationConfig(n_agents=100, household_size_distribution={7: 1.0}).validate()


def test_life_expectancy_exceeds_age(town):
    assert (town.life_expectancy > town.ages).all()


class TestIndexCaseSampler:
    def test_degenerate_weight_always_youngest_group(self, town):
        rng = np.random.default_rng(0)
        for _ in range(50):
            idx = attack_rate_weighted_index_case(town, [1, 0, 0, 0, 0], rng)
            assert town.ages[idx] <= 4

    def test_weights_must_sum_to_one(self, town):
        with pytest.raises(ValueError):
            attack_rate_weighted_index_case(town, [0.5, 0.5, 0.5, 0, 0],
                                            np.random.default_rng(0))

    def test_empty_group_with_weight_errors(self):
        pop = build_population(PopulationConfig(
            n_agents=100, rng_seed=0,
            age_distribution=np.array([0.0] * 30 + [1.0] * 30)))  # nobody under 30
        with pytest.raises(ValueError):
            attack_rate_weighted_index_case(pop, ATTACK, np.random.default_rng(0))

    def test_selection_frequencies_match_multinomial(self, town):
        # chi-square of group draw counts against the attack-rate weights
        rng = np.random.default_rng(12345)
        n_draws = 20_000
        group_of = town.age_group()
        counts = np.zeros(5)
        for _ in range(n_draws):
            counts[group_of[attack_rate_weighted_index_case(town, ATTACK, rng)]] += 1
        expected = np.asarray(ATTACK) * n_draws
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        p = stats.chi2.sf(chi2, 4)
        assert p > 0.001, (counts, expected)


def test_save_load_roundtrip(tmp_path, small_town):
    path = tmp_path / "pop.json"
    save_population(small_town, path)
    loaded = load_population(path)
    assert loaded.n_agents == small_town.n_agents
    for name in ("ages", "household_id", "cluster_id", "neighborhood_id",
                 "workgroup_id", "class_id", "grade_id", "school_id", "sc_parent"):
        assert (getattr(loaded, name) == getattr(small_town, name)).all()
    doc = json.loads(path.read_text())
    assert doc["version"] == 1
    assert {c["kind"] for c in doc["contexts"]} >= {"household", "community"}


def test_age_group_edges_cover_all_ages(town):
    groups = town.age_group()
    assert groups.min() >= 0 and groups.max() <= 4
    assert len(AGE_GROUP_EDGES) == 5
