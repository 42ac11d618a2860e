import numpy as np
import pytest

from conftest import fresh_state, micro_population

from epinet import epidemic
from epinet.epidemic import (NaturalHistory, Phase, SimParams, SimState,
                             TransmissionTable, agent_infection_prob,
                             context_infection_prob, expected_daly, ifr,
                             pair_strength_prob, pairwise_prob, step)
from epinet.interventions import Npi, NpiTable
from epinet.synthpop import ContextKind
from epinet.vaccination import Component, rollout_prepandemic


def infect(state: SimState, j: int, at_step: int, symptomatic: bool = True) -> None:
    state.phase[j] = Phase.INFECTED
    state.infection_step[j] = at_step
    state.symptomatic[j] = symptomatic


class TestNaturalHistory:
    def test_profile_anchors(self):
        nh = NaturalHistory()
        f = nh.profile()
        assert f[0] == pytest.approx(0.01)
        assert f[nh.peak_step] == 1.0
        assert f[nh.infectious_steps] == 0.0
        assert (f >= 0).all() and f.max() == 1.0

    def test_rise_is_exponential_decline_linear(self):
        nh = NaturalHistory()
        f = nh.profile()
        rise = f[: nh.peak_step + 1]
        ratios = rise[1:] / rise[:-1]
        assert np.allclose(ratios, ratios[0])  # constant ratio = exponential
        decline = f[nh.peak_step:]
        diffs = np.diff(decline)
        assert np.allclose(diffs, diffs[0])  # constant difference = linear

    def test_outside_window_zero(self):
        nh = NaturalHistory()
        assert nh.infectivity(-1) == 0.0
        assert nh.infectivity(nh.infectious_steps + 1) == 0.0

    def test_day_values_doubled_into_steps(self):
        nh = NaturalHistory(incubation_days=4, infectious_days=15)
        assert nh.peak_step == 8
        assert nh.infectious_steps == 30


class TestTransmissionTable:
    def test_lookup_covers_every_row(self):
        t = TransmissionTable()
        assert t.q(ContextKind.HOUSEHOLD, 30, 2) == 0.02420
        assert t.q(ContextKind.HOUSEHOLD, 10, 2) == 0.09335
        assert t.q(ContextKind.HOUSEHOLD, 10, 6) == 0.02588
        assert t.q(ContextKind.HOUSEHOLD_CLUSTER, 50) == 0.004
        assert t.q(ContextKind.WORK_GROUP, 40) == 0.004
        assert t.q(ContextKind.SCHOOL_CLASS, 10) == 0.00865
        assert t.q(ContextKind.GRADE, 10) == 0.00158
        assert t.q(ContextKind.SCHOOL, 10) == 0.00029
        assert t.q(ContextKind.NEIGHBORHOOD, 2) == 0.035e-5
        assert t.q(ContextKind.NEIGHBORHOOD, 70) == 5.568e-5
        assert t.q(ContextKind.COMMUNITY, 30) == 6.960e-6

    def test_invalid_pairs_error(self):
        t = TransmissionTable()
        with pytest.raises(KeyError):
            t.q(ContextKind.WORK_GROUP, 10)  # child in a working group
        with pytest.raises(KeyError):
            t.q(ContextKind.SCHOOL_CLASS, 30)  # adult in a class
        with pytest.raises(KeyError):
            t.q(ContextKind.HOUSEHOLD, 30, 9)  # no size-9 row
        with pytest.raises(KeyError):
            t.q(ContextKind.HOUSEHOLD, 30)  # household requires a size

    def test_probabilities_validated(self):
        with pytest.raises(ValueError):
            TransmissionTable(work_group=0.0)


class TestPairwiseProb:
    def make_state(self):
        # two adults in a size-2 household
        pop = micro_population([30, 40], [0, 0])
        return fresh_state(pop)

    def test_household_adult_peak_value(self):
        state = self.make_state()
        infect(state, 0, at_step=0, symptomatic=True)
        state.step_index = state.params.natural_history.peak_step  # f = 1
        v = pairwise_prob(state, 0, 1, ContextKind.HOUSEHOLD)
        assert v == pytest.approx(6.0 * 0.02420)
        assert v == pytest.approx(0.1452)

    def test_uninfected_source_is_zero(self):
        state = self.make_state()
        assert pairwise_prob(state, 0, 1, ContextKind.HOUSEHOLD) == 0.0

    def test_asymptomatic_exactly_half(self):
        state = self.make_state()
        infect(state, 0, at_step=0, symptomatic=False)
        state.step_index = state.params.natural_history.peak_step
        v = pairwise_prob(state, 0, 1, ContextKind.HOUSEHOLD)
        assert v == pytest.approx(0.5 * 0.1452)

    def test_clamp_counted(self):
        pop = micro_population([30, 40], [0, 0])
        params = SimParams(transmission=TransmissionTable(kappa=50.0))
        state = SimState(pop, params, None, None, np.random.default_rng(0))
        infect(state, 0, at_step=0)
        state.step_index = params.natural_history.peak_step
        v = pairwise_prob(state, 0, 1, ContextKind.HOUSEHOLD)
        assert v == 1.0
        assert state.eq9_clamp_events == 1

    def test_hq_amplifier_clamps_at_pair_level(self):
        # size-2 household, child recipient, HQ source at peak: 6*0.09335*2 > 1
        pop = micro_population([30, 10], [0, 0])
        state = fresh_state(pop, npi_table=NpiTable())
        infect(state, 0, at_step=0)
        state.step_index = state.params.natural_history.peak_step
        v = pair_strength_prob(state, 0, 1, ContextKind.HOUSEHOLD, int(Npi.HQ))
        assert v == 1.0
        assert state.eq9_clamp_events == 0  # Eq. 9 level never clamps at kappa=6


class TestContextProb:
    def test_no_infectious_members_zero(self):
        pop = micro_population([30, 40, 50], [0, 0, 0])
        state = fresh_state(pop)
        eff = np.zeros(3, dtype=np.int8)
        members = np.arange(3)
        assert context_infection_prob(state, 0, ContextKind.HOUSEHOLD, members, eff) == 0.0

    def test_two_sources_product_form(self):
        # force the size-3 adult row to the size-2 value so each pair is 0.1452
        table = TransmissionTable(household_to_adult={2: 0.02420, 3: 0.02420,
                                                      4: 0.01061, 5: 0.00813, 6: 0.00653})
        pop = micro_population([30, 40, 50], [0, 0, 0])
        state = SimState(pop, SimParams(transmission=table), None, None,
                         np.random.default_rng(0))
        infect(state, 1, 0)
        infect(state, 2, 0)
        state.step_index = state.params.natural_history.peak_step
        eff = np.zeros(3, dtype=np.int8)
        v = context_infection_prob(state, 0, ContextKind.HOUSEHOLD, np.arange(3), eff)
        assert v == pytest.approx(1.0 - (1.0 - 0.1452) ** 2)
        assert v == pytest.approx(0.26931696)

    def test_absorbing_clamped_source(self):
        pop = micro_population([30, 40], [0, 0])
        params = SimParams(transmission=TransmissionTable(kappa=50.0))
        state = SimState(pop, params, None, None, np.random.default_rng(0))
        infect(state, 0, 0)
        state.step_index = params.natural_history.peak_step
        eff = np.zeros(2, dtype=np.int8)
        assert context_infection_prob(state, 1, ContextKind.HOUSEHOLD,
                                      np.arange(2), eff) == 1.0


class TestIfr:
    def test_age_80_truncated(self):
        assert ifr(80) == 0.1

    def test_age_30_closed_form(self):
        expected = 0.0232 * 10 ** (-3.27 + 0.0524 * 30)
        assert ifr(30) == pytest.approx(expected)
        assert abs(ifr(30) - 4.65e-4) < 1e-6

    def test_age_80_with_vep(self):
        assert ifr(80, vep=0.92) == pytest.approx(0.008)

    def test_array_route_matches_scalar(self):
        ages = np.array([0, 25, 50, 75, 100])
        arr = epidemic.ifr_array(ages, 0.3)
        for a, v in zip(ages, arr):
            assert v == pytest.approx(ifr(a, 0.3))


class TestExpectedDaly:
    def test_recovered_only_mean_duration(self):
        daly, clamped = expected_daly(30, 82.5, ifr_v=0.0, params=SimParams())
        assert daly == pytest.approx(24.7 / 365)
        assert not clamped

    def test_certain_death_age_40(self):
        daly, _ = expected_daly(40, 82.5, ifr_v=1.0, params=SimParams())
        assert daly == pytest.approx(42.5)

    def test_negative_residual_clamped(self):
        daly, clamped = expected_daly(90, 82.5, ifr_v=1.0, params=SimParams())
        assert daly == 0.0
        assert clamped

    def test_non_infected_agents_book_nothing(self, mixed_fixture):
        state = fresh_state(mixed_fixture)
        for _ in range(10):
            step(state)
        assert state.booked_daly.sum() == 0.0


class TestEngineOracleAgreement:
    """The vectorized route and the scalar reference route are the same math."""

    def build(self, with_vax=False, seed=3):
        pop = micro_population(
            ages=[35, 40, 10, 8, 50, 30, 12, 15, 9, 6],
            household_id=[0, 0, 0, 0, 1, 1, 1, 1, 1, 1],
            workgroup_id=[0, 0, -1, -1, 0, 0, -1, -1, -1, -1],
            class_id=[-1, -1, 0, 0, -1, -1, 0, 0, 1, 1],
            grade_id=[-1, -1, 0, 0, -1, -1, 0, 0, 0, 0],
            school_id=[-1, -1, 0, 0, -1, -1, 0, 0, 0, 0],
        )
        vax = rollout_prepandemic(pop, np.random.default_rng(1), coverage=0.5) if with_vax else None
        state = SimState(pop, SimParams(), NpiTable(), vax, np.random.default_rng(seed))
        # sources at assorted infection ages, mixed symptomaticity
        infect(state, 0, at_step=6, symptomatic=True)   # delta 8: peak
        infect(state, 4, at_step=0, symptomatic=False)  # delta 14: declining
        infect(state, 6, at_step=4, symptomatic=True)   # delta 10
        state.step_index = 14
        return state

    @pytest.mark.parametrize("with_vax", [False, True])
    @pytest.mark.parametrize("cycle_offset", [0, 1])
    def test_log_survival_matches_brute_force(self, with_vax, cycle_offset):
        state = self.build(with_vax)
        state.step_index += cycle_offset
        rng = np.random.default_rng(9)
        full_eff = rng.integers(0, 6, size=10).astype(np.int8)
        src = np.flatnonzero(state.phase == Phase.INFECTED)
        logsurv = epidemic._log_survival(state, src, full_eff[src])
        engine_p = -np.expm1(logsurv) * (1.0 - state.efficacy(Component.VES))
        for i in range(10):
            if state.phase[i] != Phase.SUSCEPTIBLE:
                continue
            oracle = agent_infection_prob(state, i, full_eff)
            assert engine_p[i] == pytest.approx(oracle, rel=1e-10, abs=1e-15)

    def test_pair_probs_consistent_with_survival(self):
        state = self.build(with_vax=True)
        src = np.flatnonzero(state.phase == Phase.INFECTED)
        eff = np.array([0, 3, 1], dtype=np.int8)  # none/SD/CI for the three sources
        logsurv = epidemic._log_survival(state, src, eff)
        nh = state.params.natural_history
        delta = state.step_index - state.infection_step[src]
        w9 = state.params.transmission.kappa * nh.profile()[delta]
        w9 = np.where(state.symptomatic[src], w9, w9 * nh.asymptomatic_infectivity)
        w = w9 * (1.0 - state.efficacy(Component.VEI)[src])
        for i in range(10):
            if state.phase[i] != Phase.SUSCEPTIBLE:
                continue
            pair = epidemic._pair_probs_for(state, i, src, w, eff)
            assert np.prod(1.0 - pair) == pytest.approx(np.exp(logsurv[i]),
                                                        rel=1e-10, abs=1e-15)

    def test_monte_carlo_frequencies_match_oracle(self):
        # no NPIs so the effective flags are deterministically NONE
        state = self.build(with_vax=True)
        state.npi_table = None
        n_reps = 10_000
        eff = np.zeros(10, dtype=np.int8)
        exact = np.array([agent_infection_prob(state, i, eff)
                          if state.phase[i] == Phase.SUSCEPTIBLE else 0.0
                          for i in range(10)])
        counts = np.zeros(10)
        for rep in range(n_reps):
            trial = state.clone()
            trial.rng = np.random.default_rng(1000 + rep)
            step(trial)
            counts += trial.infection_step == state.step_index
        freq = counts / n_reps
        sigma = np.sqrt(exact * (1 - exact) / n_reps)
        sus = state.phase == Phase.SUSCEPTIBLE
        assert (np.abs(freq - exact)[sus] <= 3 * sigma[sus] + 1e-12).all(), (
            freq[sus], exact[sus])


class TestStepDynamics:
    def test_day_cycle_only_day_contexts(self):
        # infectious adult without a workgroup: day step infects nobody
        pop = micro_population([70, 40, 10], [0, 0, 0])
        state = fresh_state(pop)
        infect(state, 0, at_step=-8)
        assert state.cycle == "day"
        for rep in range(200):
            trial = state.clone()
            trial.rng = np.random.default_rng(rep)
            step(trial)
            assert trial.ledger.new_infections[-1] == 0

    def test_removal_at_t_inf(self):
        pop = micro_population([30, 40], [0, 0])
        state = fresh_state(pop)
        infect(state, 0, at_step=0)
        nh = state.params.natural_history
        for _ in range(nh.infectious_steps + 1):
            step(state)
        assert state.phase[0] == Phase.REMOVED
        assert state.cum_deaths + state.cum_recoveries == 1

    def test_all_removed_population_is_flat(self, mixed_fixture):
        state = fresh_state(mixed_fixture)
        state.phase[:] = Phase.REMOVED
        state.infection_step[:] = 0
        for _ in range(100):
            step(state)
        led = state.ledger
        assert sum(led.new_infections) == 0
        assert sum(led.deaths) + sum(led.recoveries) == 0
        assert led.total_booked_daly() == 0.0

    def test_conservation_and_single_infection_write(self, town):
        state = SimState(town, SimParams(), NpiTable(), None, np.random.default_rng(8))
        seeds = np.random.default_rng(1).choice(town.n_agents, size=5, replace=False)
        epidemic.seed_infections(state, seeds)
        recorded = {}
        n = town.n_agents
        for _ in range(60):
            step(state, sd_level=0.2)
            s, i, r = state.counts()
            assert s + i + r == n
            for a in np.flatnonzero(state.infection_step >= 0):
                prev = recorded.setdefault(int(a), int(state.infection_step[a]))
                assert prev == int(state.infection_step[a])  # written at most once
        assert sum(state.ledger.new_infections) > 5  # outbreak actually spread
        assert state.ledger.total_booked_daly() == pytest.approx(
            state.booked_daly.sum())

    def test_detection_channels_and_hq_window(self, town):
        state = SimState(town, SimParams(), NpiTable(), None, np.random.default_rng(3))
        seeds = np.arange(40)
        epidemic.seed_infections(state, seeds)
        peak = state.params.natural_history.peak_step
        for _ in range(peak + 1):
            step(state)
        det = state.detected[seeds]
        sym = state.symptomatic[seeds]
        # symptomatic cases detect at 0.9, asymptomatic at 0.1
        assert det[sym].mean() > 0.6
        assert det[~sym].mean() < 0.5
        assert state.cum_detected == int(det.sum())
        hh_detected = np.unique(town.household_id[seeds[det]])
        assert (state.hq_until_day[hh_detected] > state.day).all()

    def test_deterministic_for_fixed_stream(self, small_town):
        def run(seed):
            state = SimState(small_town, SimParams(), NpiTable(), None,
                             np.random.default_rng(seed))
            epidemic.seed_infections(state, np.arange(3))
            for _ in range(40):
                step(state, sd_level=0.4)
            return state
        a, b = run(5), run(5)
        assert (a.infection_step == b.infection_step).all()
        assert a.ledger.new_infections == b.ledger.new_infections
        c = run(6)
        assert (a.infection_step != c.infection_step).any()

    def test_eq9_clamps_zero_under_default_kappa(self, small_town):
        state = SimState(small_town, SimParams(), NpiTable(), None,
                         np.random.default_rng(0))
        epidemic.seed_infections(state, np.arange(5))
        for _ in range(60):
            step(state, sd_level=0.3)
        assert state.eq9_clamp_events == 0
        # max kappa*q = 6 * 0.09335 < 1 guards the invariant
        assert 6.0 * 0.09335 == pytest.approx(0.5601)


class TestKappaMonotonicity:
    def test_one_step_coupling_set_dominance(self, small_town):
        # same uniforms: the infected set under higher kappa contains the
        # infected set under lower kappa, exactly
        def infected_set(kappa, seed):
            params = SimParams(transmission=TransmissionTable(kappa=kappa))
            state = SimState(small_town, params, None, None, np.random.default_rng(seed))
            infect(state, 0, at_step=-8)
            infect(state, 57, at_step=-8)
            state.step_index = 1  # night cycle
            step(state)
            return set(np.flatnonzero(state.infection_step == 1))
        for seed in range(30):
            low = infected_set(5.0, seed)
            high = infected_set(7.0, seed)
            assert low <= high

    def test_expected_secondaries_non_decreasing(self, small_town):
        from epinet.scenario import r0_replicate
        from epinet.rng import task_generator

        def mean_secondaries(kappa):
            params = SimParams(transmission=TransmissionTable(kappa=kappa))
            counts = [r0_replicate(small_town, params, task_generator(11, rep))
                      for rep in range(120)]
            return np.mean(counts)
        assert mean_secondaries(6.4) >= mean_secondaries(5.6) - 0.5


def test_ledger_csv_roundtrip(tmp_path, mixed_fixture):
    state = fresh_state(mixed_fixture)
    infect(state, 0, at_step=0)
    for _ in range(6):
        step(state)
    path = tmp_path / "ledger.csv"
    state.ledger.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,new_infections,detected_sym,detected_asym,deaths,recoveries,booked_daly"
    assert len(lines) == 7
