"""Discrete-time stochastic transmission engine.

Time advances in 12-hour steps, two per day: the day cycle activates working
groups and school contexts, the night cycle households, household clusters,
neighborhoods and communities. Per step, each susceptible agent's infection
probability is composed across every active context it shares with infectious
agents,

    p_i = (1 - VEs_i) * (1 - prod_g prod_j (1 - (1 - VEi_j) F_g(j) p_{j->i}^g))

with the pairwise term p_{j->i}^g = kappa * f(n - n_j) * q_g, scaled by the
asymptomatic infectivity factor when the source is asymptomatic. Infection,
symptomaticity, fatality outcome and case detection are all sampled when an
exposure resolves; the infection's expected DALY loss is booked immediately
(fatality-weighted years of life lost plus expected illness duration), which
keeps per-period loss accounting low-variance for learning.

The hot path accumulates log-survival terms per context with `bincount`; the
scalar functions (`pairwise_prob`, `context_infection_prob`,
`agent_infection_prob`) are the readable reference route used as the oracle
in tests. Both routes compute the same product, so they agree to floating
rounding.
"""
from __future__ import annotations

import copy
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .interventions import KIND_INDEX, NpiTable, resolve_effective
from .synthpop import ContextKind, Population
from .vaccination import Component, VaccinationState

log = logging.getLogger(__name__)

#: Constants of the truncated age-specific infection fatality rate.
IFR_CEILING = 0.1
IFR_SCALE = 0.0232
IFR_EXP_BASE = -3.27
IFR_EXP_AGE = 0.0524

DAYS_PER_YEAR = 365.0

_KI_HH = KIND_INDEX[ContextKind.HOUSEHOLD]
_KI_CL = KIND_INDEX[ContextKind.HOUSEHOLD_CLUSTER]
_KI_WG = KIND_INDEX[ContextKind.WORK_GROUP]
_KI_CLASS = KIND_INDEX[ContextKind.SCHOOL_CLASS]
_KI_GRADE = KIND_INDEX[ContextKind.GRADE]
_KI_SCHOOL = KIND_INDEX[ContextKind.SCHOOL]
_KI_NB = KIND_INDEX[ContextKind.NEIGHBORHOOD]
_KI_CM = KIND_INDEX[ContextKind.COMMUNITY]


def ifr(age: float, vep: float = 0.0) -> float:
    """Infection fatality rate: age-dependent, truncated, vaccine-adjusted."""
    return (1.0 - vep) * min(IFR_CEILING, IFR_SCALE * 10.0 ** (IFR_EXP_BASE + IFR_EXP_AGE * age))


def ifr_array(ages: np.ndarray, vep: np.ndarray | float = 0.0) -> np.ndarray:
    base = np.minimum(IFR_CEILING, IFR_SCALE * 10.0 ** (IFR_EXP_BASE + IFR_EXP_AGE * ages))
    return (1.0 - vep) * base


class Phase(enum.IntEnum):
    SUSCEPTIBLE = 0
    INFECTED = 1
    REMOVED = 2


@dataclass(frozen=True)
class NaturalHistory:
    """Within-host infectivity profile f(delta) on the 12-hour step grid.

    Infectivity rises exponentially from `rise_start` at the end of the
    latent period to 1.0 at the incubation peak, then declines linearly to
    zero at the end of the infectious period.
    """

    latent_days: float = 0.0
    incubation_days: float = 4.0
    infectious_days: float = 15.0
    asymptomatic_infectivity: float = 0.5
    rise_start: float = 0.01
    steps_per_day: int = 2

    def __post_init__(self) -> None:
        if self.infectious_days <= self.latent_days + self.incubation_days:
            raise ValueError("infectious period must extend past the incubation peak")
        if not 0.0 < self.asymptomatic_infectivity <= 1.0:
            raise ValueError("asymptomatic_infectivity must be in (0, 1]")
        object.__setattr__(self, "_profile", self._build_profile())

    @property
    def latent_steps(self) -> int:
        return int(round(self.latent_days * self.steps_per_day))

    @property
    def peak_step(self) -> int:
        return int(round((self.latent_days + self.incubation_days) * self.steps_per_day))

    @property
    def infectious_steps(self) -> int:
        return int(round(self.infectious_days * self.steps_per_day))

    def _build_profile(self) -> np.ndarray:
        t_peak, t_end = self.peak_step, self.infectious_steps
        f = np.zeros(t_end + 1)
        rise_len = max(t_peak - self.latent_steps, 1)
        d = np.arange(self.latent_steps, t_peak + 1)
        f[self.latent_steps: t_peak + 1] = self.rise_start ** (1.0 - (d - self.latent_steps) / rise_len)
        d2 = np.arange(t_peak + 1, t_end + 1)
        f[t_peak + 1:] = (t_end - d2) / (t_end - t_peak)
        return f

    def profile(self) -> np.ndarray:
        """f(delta) for delta in 0..infectious_steps (inclusive)."""
        return self._profile

    def infectivity(self, delta_steps: int) -> float:
        if delta_steps < 0 or delta_steps > self.infectious_steps:
            return 0.0
        return float(self._profile[delta_steps])


_HOUSEHOLD_TO_CHILD = {2: 0.09335, 3: 0.05847, 4: 0.04176, 5: 0.03211, 6: 0.02588}
_HOUSEHOLD_TO_ADULT = {2: 0.02420, 3: 0.01495, 4: 0.01061, 5: 0.00813, 6: 0.00653}


@dataclass(frozen=True)
class TransmissionTable:
    """Daily transmission probabilities at peak infectivity, per context.

    Household rows depend on the household size and on whether the recipient
    is a child (0-18) or adult (19+); neighborhood and community rows depend
    on the recipient age group [0-4, 5-18, 19-64, 65+]. `kappa` is the global
    scalar used to calibrate the reproduction number.
    """

    kappa: float = 6.0
    sigma_adult: float = 0.67  # symptomatic fraction, age >= 18
    sigma_child: float = 0.268  # symptomatic fraction, age < 18
    household_to_child: dict[int, float] = field(default_factory=lambda: dict(_HOUSEHOLD_TO_CHILD))
    household_to_adult: dict[int, float] = field(default_factory=lambda: dict(_HOUSEHOLD_TO_ADULT))
    household_cluster: float = 0.004
    work_group: float = 0.004
    school_class: float = 0.00865
    grade: float = 0.00158
    school: float = 0.00029
    neighborhood: tuple[float, float, float, float] = (0.035e-5, 1.044e-5, 2.784e-5, 5.568e-5)
    community: tuple[float, float, float, float] = (0.872e-6, 2.608e-6, 6.960e-6, 13.92e-6)

    def __post_init__(self) -> None:
        qs = [*self.household_to_child.values(), *self.household_to_adult.values(),
              self.household_cluster, self.work_group, self.school_class, self.grade,
              self.school, *self.neighborhood, *self.community]
        if any(not 0.0 < q < 1.0 for q in qs):
            raise ValueError("all peak transmission probabilities must lie in (0, 1)")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")

    def q(self, kind: ContextKind, recipient_age: int, household_size: int | None = None) -> float:
        """Peak daily probability for a (context, recipient) pair.

        Raises KeyError for pairs outside the table (e.g. a child recipient
        in a working group).
        """
        if kind is ContextKind.HOUSEHOLD:
            if household_size is None:
                raise KeyError("household lookup requires the household size")
            row = self.household_to_adult if recipient_age >= 19 else self.household_to_child
            if household_size not in row:
                raise KeyError(f"no household row for size {household_size}")
            return row[household_size]
        if kind is ContextKind.HOUSEHOLD_CLUSTER:
            return self.household_cluster
        if kind is ContextKind.WORK_GROUP:
            if recipient_age < 19:
                raise KeyError("working-group transmission is defined for adults (19+) only")
            return self.work_group
        if kind in (ContextKind.SCHOOL_CLASS, ContextKind.GRADE, ContextKind.SCHOOL):
            if recipient_age > 18:
                raise KeyError("school transmission is defined for children (0-18) only")
            return {ContextKind.SCHOOL_CLASS: self.school_class,
                    ContextKind.GRADE: self.grade,
                    ContextKind.SCHOOL: self.school}[kind]
        group = 0 if recipient_age <= 4 else 1 if recipient_age <= 18 else 2 if recipient_age <= 64 else 3
        if kind is ContextKind.NEIGHBORHOOD:
            return self.neighborhood[group]
        if kind is ContextKind.COMMUNITY:
            return self.community[group]
        raise KeyError(f"unknown context kind {kind!r}")

    def sigma(self, age: int) -> float:
        return self.sigma_adult if age >= 18 else self.sigma_child

    def hh_child_by_size(self) -> np.ndarray:
        out = np.zeros(7)
        for s, q in self.household_to_child.items():
            out[s] = q
        return out

    def hh_adult_by_size(self) -> np.ndarray:
        out = np.zeros(7)
        for s, q in self.household_to_adult.items():
            out[s] = q
        return out


@dataclass(frozen=True)
class SimParams:
    """Disease model bundle: natural history, transmission, detection, DALY."""

    natural_history: NaturalHistory = field(default_factory=NaturalHistory)
    transmission: TransmissionTable = field(default_factory=TransmissionTable)
    detect_p_symptomatic: float = 0.9  # detected at symptom onset
    detect_p_asymptomatic: float = 0.1  # detected at infectivity peak
    mean_illness_days: float = 24.7  # onset-to-recovery gamma mean
    illness_cv: float = 0.35
    disability_weight: float = 1.0


def expected_daly(age: float, life_expectancy: float, ifr_v: float,
                  params: SimParams) -> tuple[float, bool]:
    """Expected DALY loss booked at infection time.

    Returns (daly, yll_clamped): fatality-probability-weighted years of life
    lost plus survival-weighted expected illness duration. Negative residual
    life expectancy clamps YLL at zero.
    """
    residual = life_expectancy - age
    yll = max(0.0, residual)
    yld = params.disability_weight * params.mean_illness_days / DAYS_PER_YEAR
    return ifr_v * yll + (1.0 - ifr_v) * yld, residual < 0


def sample_illness_duration(params: SimParams, rng: np.random.Generator, size=None):
    """Onset-to-recovery duration in days (gamma with configured mean/CV)."""
    shape = 1.0 / params.illness_cv ** 2
    scale = params.mean_illness_days / shape
    return rng.gamma(shape, scale, size=size)


class HealthLedger:
    """Per-step event and DALY accounting."""

    COLUMNS = ("step", "new_infections", "detected_sym", "detected_asym",
               "deaths", "recoveries", "booked_daly")

    def __init__(self) -> None:
        self.new_infections: list[int] = []
        self.detected_sym: list[int] = []
        self.detected_asym: list[int] = []
        self.deaths: list[int] = []
        self.recoveries: list[int] = []
        self.booked_daly: list[float] = []

    def append(self, infections: int, det_sym: int, det_asym: int,
               deaths: int, recoveries: int, daly: float) -> None:
        self.new_infections.append(infections)
        self.detected_sym.append(det_sym)
        self.detected_asym.append(det_asym)
        self.deaths.append(deaths)
        self.recoveries.append(recoveries)
        self.booked_daly.append(daly)

    @property
    def n_steps(self) -> int:
        return len(self.new_infections)

    def total_booked_daly(self) -> float:
        return float(np.sum(self.booked_daly))

    def cumulative(self, name: str) -> np.ndarray:
        return np.cumsum(getattr(self, name))

    def daily_detected(self) -> np.ndarray:
        """Detected incidence (both channels) aggregated to whole days."""
        det = np.asarray(self.detected_sym) + np.asarray(self.detected_asym)
        if det.size % 2:
            det = np.append(det, 0)
        return det.reshape(-1, 2).sum(axis=1)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for s in range(self.n_steps):
                fh.write(f"{s},{self.new_infections[s]},{self.detected_sym[s]},"
                         f"{self.detected_asym[s]},{self.deaths[s]},{self.recoveries[s]},"
                         f"{self.booked_daly[s]!r}\n")


class SimState:
    """Mutable simulation state for one episode (single-threaded use).

    Parallelism happens across episodes, each with its own SimState and RNG
    stream; the shared Population is immutable.
    """

    def __init__(self, pop: Population, params: SimParams, npi_table: Optional[NpiTable],
                 vax: Optional[VaccinationState], rng: np.random.Generator,
                 sc_active: bool = False, track_infectors: bool = False):
        n = pop.n_agents
        self.pop = pop
        self.params = params
        self.npi_table = npi_table
        self.vax = vax
        self.rng = rng
        self.sc_active = sc_active
        self.track_infectors = track_infectors

        self.step_index = 0
        self.phase = np.zeros(n, dtype=np.int8)
        self.infection_step = np.full(n, -1, dtype=np.int64)
        self.symptomatic = np.zeros(n, dtype=bool)
        self.will_die = np.zeros(n, dtype=bool)
        self.detect_fate = np.zeros(n, dtype=bool)
        self.detection_step = np.full(n, -1, dtype=np.int64)
        self.detected = np.zeros(n, dtype=bool)
        self.booked_daly = np.zeros(n)
        self.infector = np.full(n, -2, dtype=np.int64)  # -2 never infected, -1 seeded
        self.hq_until_day = np.full(pop.n_households, -np.inf)

        self.cum_detected = 0
        self.cum_deaths = 0
        self.cum_recoveries = 0
        self.eq9_clamp_events = 0
        self.pair_clamp_events = 0
        self.yll_clamp_events = 0
        self.ledger = HealthLedger()
        self._pending_seed_count = 0
        self._pending_seed_daly = 0.0

        self._profile = params.natural_history.profile()
        self._strengths = (npi_table or NpiTable()).strength_matrix()
        self._q_hh_child = params.transmission.hh_child_by_size()
        self._q_hh_adult = params.transmission.hh_adult_by_size()
        self._q_nbhd = np.asarray(params.transmission.neighborhood)
        self._q_comm = np.asarray(params.transmission.community)

        # static recipient scatter plans: (agent indices, their context ids)
        child_sel = np.flatnonzero(~pop.adult_transmission)
        adult_sel = np.flatnonzero(pop.adult_transmission)
        worker_sel = np.flatnonzero(pop.workgroup_id >= 0)
        student_sel = np.flatnonzero(pop.class_id >= 0)
        self._plan_hh = {False: (child_sel, pop.household_id[child_sel]),
                         True: (adult_sel, pop.household_id[adult_sel])}
        self._plan_cl = (np.arange(pop.n_agents), pop.cluster_id)
        self._plan_wg = (worker_sel, pop.workgroup_id[worker_sel])
        self._plan_class = (student_sel, pop.class_id[student_sel])
        self._plan_grade = (student_sel, pop.grade_id[student_sel])
        self._plan_school = (student_sel, pop.school_id[student_sel])
        self._plan_nb = []
        self._plan_cm = []
        for g in range(4):
            sel = np.flatnonzero(pop.recipient_group == g)
            self._plan_nb.append((sel, pop.neighborhood_id[sel]))
            self._plan_cm.append((sel, pop.community_id[sel]))
        self._n_ctx = {
            _KI_HH: pop.n_households, _KI_CL: pop.n_clusters,
            _KI_WG: int(pop.workgroup_id.max()) + 1,
            _KI_CLASS: int(pop.class_id.max()) + 1,
            _KI_GRADE: int(pop.grade_id.max()) + 1,
            _KI_SCHOOL: int(pop.school_id.max()) + 1,
            _KI_NB: pop.n_neighborhoods, _KI_CM: pop.n_communities,
        }

    @property
    def day(self) -> int:
        return self.step_index // 2

    @property
    def cycle(self) -> str:
        return "day" if self.step_index % 2 == 0 else "night"

    @property
    def n_infected(self) -> int:
        return int(np.sum(self.phase == Phase.INFECTED))

    def counts(self) -> tuple[int, int, int]:
        return (int(np.sum(self.phase == Phase.SUSCEPTIBLE)), self.n_infected,
                int(np.sum(self.phase == Phase.REMOVED)))

    def efficacy(self, component: Component) -> np.ndarray:
        if self.vax is None:
            return np.zeros(self.pop.n_agents)
        return self.vax.component_array(component, float(self.day))

    def clone(self) -> "SimState":
        dup = object.__new__(SimState)
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                setattr(dup, k, v.copy())
            elif k in ("rng", "ledger", "vax"):
                setattr(dup, k, copy.deepcopy(v))
            else:
                setattr(dup, k, v)
        return dup


# --- scalar reference route (test oracles use this) ---------------------------

def pairwise_prob(state: SimState, j: int, i: int, kind: ContextKind,
                  at_step: int | None = None, count_clamp: bool = True) -> float:
    """Instantaneous transmission probability kappa * f(n - n_j) * q from j to i.

    Zero when j is not infectious at the step; the asymptomatic factor is
    applied; values above 1 clamp (counted on the state).
    """
    n = state.step_index if at_step is None else at_step
    if state.infection_step[j] < 0 or state.phase[j] == Phase.REMOVED:
        return 0.0
    delta = int(n - state.infection_step[j])
    nh = state.params.natural_history
    if delta < 0 or delta > nh.infectious_steps:
        return 0.0
    t = state.params.transmission
    size = int(state.pop.household_size[i]) if kind is ContextKind.HOUSEHOLD else None
    v = t.kappa * nh.infectivity(delta) * t.q(kind, int(state.pop.ages[i]), size)
    if not state.symptomatic[j]:
        v *= nh.asymptomatic_infectivity
    if v > 1.0:
        if count_clamp:
            state.eq9_clamp_events += 1
        return 1.0
    return v


def pair_strength_prob(state: SimState, j: int, i: int, kind: ContextKind,
                       effective_npi: int, at_step: int | None = None) -> float:
    """Pairwise probability including the source's NPI strength and VEi."""
    base = pairwise_prob(state, j, i, kind, at_step, count_clamp=False)
    vei = float(state.efficacy(Component.VEI)[j])
    v = (1.0 - vei) * state._strengths[int(effective_npi), KIND_INDEX[kind]] * base
    if v > 1.0:
        return 1.0
    return v


def shared_contexts(pop: Population, i: int, cycle: str) -> list[tuple[ContextKind, np.ndarray]]:
    """Contexts of agent i active in the given cycle, with member lists."""
    out = []
    if cycle == "day":
        if pop.workgroup_id[i] >= 0:
            out.append((ContextKind.WORK_GROUP,
                        np.flatnonzero(pop.workgroup_id == pop.workgroup_id[i])))
        if pop.class_id[i] >= 0:
            out.append((ContextKind.SCHOOL_CLASS,
                        np.flatnonzero(pop.class_id == pop.class_id[i])))
            out.append((ContextKind.GRADE,
                        np.flatnonzero(pop.grade_id == pop.grade_id[i])))
            out.append((ContextKind.SCHOOL,
                        np.flatnonzero(pop.school_id == pop.school_id[i])))
    else:
        out.append((ContextKind.HOUSEHOLD,
                    np.flatnonzero(pop.household_id == pop.household_id[i])))
        out.append((ContextKind.HOUSEHOLD_CLUSTER,
                    np.flatnonzero(pop.cluster_id == pop.cluster_id[i])))
        out.append((ContextKind.NEIGHBORHOOD,
                    np.flatnonzero(pop.neighborhood_id == pop.neighborhood_id[i])))
        out.append((ContextKind.COMMUNITY,
                    np.flatnonzero(pop.community_id == pop.community_id[i])))
    return out


def context_infection_prob(state: SimState, i: int, kind: ContextKind,
                           members: np.ndarray, effective_npi: np.ndarray,
                           at_step: int | None = None) -> float:
    """Probability that i is infected within one context (product form)."""
    surv = 1.0
    for j in members:
        if j == i or state.phase[j] != Phase.INFECTED:
            continue
        surv *= 1.0 - pair_strength_prob(state, int(j), i, kind,
                                         int(effective_npi[j]), at_step)
    return 1.0 - surv


def agent_infection_prob(state: SimState, i: int, effective_npi: np.ndarray,
                         at_step: int | None = None) -> float:
    """Full per-step infection probability for agent i (reference route).

    Composes every context shared with infectious agents in the current
    cycle and applies the recipient's susceptibility efficacy. Agents
    infected at the current step are excluded (exposures resolve at step
    end, so their first transmission opportunity is the following step).
    """
    if state.phase[i] != Phase.SUSCEPTIBLE:
        return 0.0
    n = state.step_index if at_step is None else at_step
    surv = 1.0
    for kind, members in shared_contexts(state.pop, i, state.cycle):
        fresh = state.infection_step[members] == n
        surv *= 1.0 - context_infection_prob(state, i, kind, members[~fresh],
                                             effective_npi, at_step)
    ves = float(state.efficacy(Component.VES)[i])
    return (1.0 - ves) * (1.0 - surv)


# --- vectorized engine ---------------------------------------------------------

def _draw_flags(state: SimState, agents: np.ndarray, sd_level: float) -> np.ndarray:
    """Per-step compliance draw for the given agents, as Npi codes.

    Recipient-side compliance never enters the transmission product, so the
    engine draws flags for infectious sources only; the distribution matches
    `interventions.draw_compliance` agent-for-agent.
    """
    table = state.npi_table
    n = agents.size
    if table is None or n == 0:
        return np.zeros(n, dtype=np.int8)
    u = state.rng.random((4, n))
    ci_eligible = state.detected[agents] & state.symptomatic[agents] & (
        state.phase[agents] == Phase.INFECTED)
    hq_eligible = state.hq_until_day[state.pop.household_id[agents]] > state.day
    ci = ci_eligible & (u[0] < table.ci_compliance)
    hq = hq_eligible & (u[1] < table.hq_compliance)
    sd = u[2] < sd_level
    is_student = state.pop.class_id[agents] >= 0
    if state.sc_active:
        sc = (is_student & (u[3] < table.sc_child_compliance)) | (
            state.pop.sc_parent[agents] & (u[3] < table.sc_parent_compliance))
    else:
        sc = np.zeros(n, dtype=bool)
    return resolve_effective(ci, hq, sd, sc, is_student)


def _log_survival(state: SimState, src: np.ndarray, eff: np.ndarray) -> np.ndarray:
    """log of the per-agent survival product over all active contexts.

    Exact: q never depends jointly on source and recipient, so each context's
    inner product factors over recipient classes and reduces to per-context
    `bincount` sums of log(1 - pair probability).
    """
    pop = state.pop
    nh = state.params.natural_history
    t = state.params.transmission
    F = state._strengths

    delta = state.step_index - state.infection_step[src]
    w9 = t.kappa * state._profile[delta]
    w9 = np.where(state.symptomatic[src], w9, w9 * nh.asymptomatic_infectivity)
    w = w9 * (1.0 - state.efficacy(Component.VEI)[src])

    logsurv = np.zeros(pop.n_agents)

    def accumulate(sub: np.ndarray | slice, src_ctx_ids: np.ndarray,
                   q_sub: np.ndarray | float, kind_idx: int,
                   plan: tuple[np.ndarray, np.ndarray]) -> None:
        if src_ctx_ids.size == 0:
            return
        pair9 = w9[sub] * q_sub
        state.eq9_clamp_events += int(np.count_nonzero(pair9 > 1.0))
        pair = w[sub] * F[eff[sub], kind_idx] * q_sub
        state.pair_clamp_events += int(np.count_nonzero(pair > 1.0))
        vals = np.log1p(-np.minimum(1.0, pair))  # -inf encodes a certain pair
        acc = np.bincount(src_ctx_ids, weights=vals, minlength=state._n_ctx[kind_idx])
        recip_idx, recip_ctx = plan
        logsurv[recip_idx] += acc[recip_ctx]

    everyone = slice(None)
    with np.errstate(divide="ignore"):
        if state.cycle == "day":
            working = np.flatnonzero(pop.workgroup_id[src] >= 0)
            accumulate(working, pop.workgroup_id[src[working]], t.work_group,
                       _KI_WG, state._plan_wg)
            schooling = np.flatnonzero(pop.class_id[src] >= 0)
            if schooling.size:
                s_sub = src[schooling]
                accumulate(schooling, pop.class_id[s_sub], t.school_class,
                           _KI_CLASS, state._plan_class)
                accumulate(schooling, pop.grade_id[s_sub], t.grade,
                           _KI_GRADE, state._plan_grade)
                accumulate(schooling, pop.school_id[s_sub], t.school,
                           _KI_SCHOOL, state._plan_school)
        else:
            hh_src = pop.household_id[src]
            size_src = pop.household_size[src]
            accumulate(everyone, hh_src, state._q_hh_child[size_src],
                       _KI_HH, state._plan_hh[False])
            accumulate(everyone, hh_src, state._q_hh_adult[size_src],
                       _KI_HH, state._plan_hh[True])
            accumulate(everyone, pop.cluster_id[src], t.household_cluster,
                       _KI_CL, state._plan_cl)
            nb_src = pop.neighborhood_id[src]
            cm_src = pop.community_id[src]
            for g in range(4):
                accumulate(everyone, nb_src, float(state._q_nbhd[g]),
                           _KI_NB, state._plan_nb[g])
                accumulate(everyone, cm_src, float(state._q_comm[g]),
                           _KI_CM, state._plan_cm[g])

    return logsurv


def _pair_probs_for(state: SimState, i: int, src: np.ndarray, w: np.ndarray,
                    eff: np.ndarray) -> np.ndarray:
    """Per-source combined transmission probability toward agent i.

    Matches the factors of `_log_survival` exactly; used for infector
    attribution.
    """
    pop = state.pop
    F = state._strengths
    surv = np.ones(src.size)

    def fold(mask: np.ndarray, q: float | np.ndarray, kind_idx: int) -> None:
        pair = np.minimum(1.0, w[mask] * F[eff[mask], kind_idx] * q)
        surv[mask] *= 1.0 - pair

    if state.cycle == "day":
        if pop.workgroup_id[i] >= 0 and pop.adult_transmission[i]:
            fold(pop.workgroup_id[src] == pop.workgroup_id[i], state.params.transmission.work_group, _KI_WG)
        if pop.class_id[i] >= 0 and not pop.adult_transmission[i]:
            t = state.params.transmission
            fold(pop.class_id[src] == pop.class_id[i], t.school_class, _KI_CLASS)
            fold(pop.grade_id[src] == pop.grade_id[i], t.grade, _KI_GRADE)
            fold(pop.school_id[src] == pop.school_id[i], t.school, _KI_SCHOOL)
    else:
        q_hh = (state._q_hh_adult if pop.adult_transmission[i] else state._q_hh_child)
        same_hh = pop.household_id[src] == pop.household_id[i]
        fold(same_hh, q_hh[int(pop.household_size[i])], _KI_HH)
        fold(pop.cluster_id[src] == pop.cluster_id[i], state.params.transmission.household_cluster, _KI_CL)
        g = int(pop.recipient_group[i])
        fold(pop.neighborhood_id[src] == pop.neighborhood_id[i], float(state._q_nbhd[g]), _KI_NB)
        fold(pop.community_id[src] == pop.community_id[i], float(state._q_comm[g]), _KI_CM)
    return 1.0 - surv


def _attribute_infectors(state: SimState, infected: np.ndarray, src: np.ndarray,
                         w: np.ndarray, eff: np.ndarray) -> None:
    """Choose one infector per new infection: uniformly among the sources
    whose independent per-pair Bernoulli would have fired, realized as the
    first firer of a random source order (conditioned on at least one firing).
    """
    for i in infected:
        pair = _pair_probs_for(state, int(i), src, w, eff)
        order = state.rng.permutation(src.size)
        p_ord = pair[order]
        # survival of the tail l >= k
        tail = np.cumprod((1.0 - p_ord)[::-1])[::-1]
        chosen = -2
        for k in range(src.size):
            fire_any = 1.0 - tail[k]
            if fire_any <= 0.0:
                break
            if state.rng.random() < p_ord[k] / fire_any:
                chosen = int(src[order[k]])
                break
        state.infector[i] = chosen


def _register_infections(state: SimState, agents: np.ndarray) -> float:
    """Sample symptomaticity, outcome and detection; book expected DALY."""
    pop = state.pop
    params = state.params
    day = float(state.day)
    k = agents.size
    if state.vax is not None:
        ved = state.vax.component_array(Component.VED, day)[agents]
        vep = state.vax.component_array(Component.VEP, day)[agents]
    else:
        ved = np.zeros(k)
        vep = np.zeros(k)

    u = state.rng.random((3, k))
    sigma = np.where(pop.adult_clinical[agents],
                     params.transmission.sigma_adult, params.transmission.sigma_child)
    symptomatic = u[0] < (1.0 - ved) * sigma
    ifr_v = ifr_array(pop.ages[agents], vep)
    will_die = u[1] < ifr_v
    p_det = np.where(symptomatic, params.detect_p_symptomatic, params.detect_p_asymptomatic)
    detect = u[2] < p_det

    state.phase[agents] = Phase.INFECTED
    state.infection_step[agents] = state.step_index
    state.symptomatic[agents] = symptomatic
    state.will_die[agents] = will_die
    state.detect_fate[agents] = detect
    state.detection_step[agents] = np.where(
        detect, state.step_index + params.natural_history.peak_step, -1)

    residual = pop.life_expectancy[agents] - pop.ages[agents]
    clamped = residual < 0
    if clamped.any():
        state.yll_clamp_events += int(clamped.sum())
        log.debug("clamped %d negative YLL residuals at step %d",
                  int(clamped.sum()), state.step_index)
    yld = params.disability_weight * params.mean_illness_days / DAYS_PER_YEAR
    booked = ifr_v * np.maximum(0.0, residual) + (1.0 - ifr_v) * yld
    state.booked_daly[agents] = booked
    return float(booked.sum())


def seed_infections(state: SimState, agents: np.ndarray) -> float:
    """Infect imported cases (no infector); booked into the next step's row."""
    agents = np.asarray(agents, dtype=np.int64)
    if agents.size == 0:
        return 0.0
    if (state.phase[agents] != Phase.SUSCEPTIBLE).any():
        raise ValueError("can only seed susceptible agents")
    daly = _register_infections(state, agents)
    state.infector[agents] = -1
    state._pending_seed_count += int(agents.size)
    state._pending_seed_daly += daly
    return daly


def step(state: SimState, sd_level: float = 0.0) -> dict:
    """Advance the simulation by one 12-hour step.

    Order: removals, scheduled detections, compliance draw over infectious
    sources, synchronous exposure resolution against the pre-step infectious
    set, infection bookkeeping. Returns the step's event counts.
    """
    if not 0.0 <= sd_level <= 1.0:
        raise ValueError(f"sd_level must be in [0, 1], got {sd_level}")
    pop = state.pop
    nh = state.params.natural_history
    n_step = state.step_index

    deaths = recoveries = 0
    infected_now = np.flatnonzero(state.phase == Phase.INFECTED)
    if infected_now.size:
        delta = n_step - state.infection_step[infected_now]
        done = infected_now[delta >= nh.infectious_steps]
        if done.size:
            state.phase[done] = Phase.REMOVED
            deaths = int(np.sum(state.will_die[done]))
            recoveries = int(done.size) - deaths
            state.cum_deaths += deaths
            state.cum_recoveries += recoveries

    det_sym = det_asym = 0
    due = np.flatnonzero(state.detect_fate & ~state.detected
                         & (state.detection_step == n_step))
    if due.size:
        state.detected[due] = True
        det_sym = int(np.sum(state.symptomatic[due]))
        det_asym = int(due.size) - det_sym
        state.cum_detected += int(due.size)
        if state.npi_table is not None:
            np.maximum.at(state.hq_until_day, pop.household_id[due],
                          state.day + state.npi_table.hq_duration_days)

    new_count = 0
    booked = 0.0
    src = np.flatnonzero(state.phase == Phase.INFECTED)
    if src.size:
        delta = n_step - state.infection_step[src]
        src = src[(delta >= 1) & (delta <= nh.infectious_steps)]
    if src.size:
        eff = _draw_flags(state, src, sd_level)
        logsurv = _log_survival(state, src, eff)
        p = -np.expm1(logsurv)
        p *= 1.0 - state.efficacy(Component.VES)
        p[state.phase != Phase.SUSCEPTIBLE] = 0.0
        new = np.flatnonzero(state.rng.random(pop.n_agents) < p)
        if new.size:
            if state.track_infectors:
                delta_src = n_step - state.infection_step[src]
                w9 = state.params.transmission.kappa * state._profile[delta_src]
                w9 = np.where(state.symptomatic[src], w9, w9 * nh.asymptomatic_infectivity)
                w = w9 * (1.0 - state.efficacy(Component.VEI)[src])
                _attribute_infectors(state, new, src, w, eff)
            booked = _register_infections(state, new)
            new_count = int(new.size)

    state.ledger.append(new_count + state._pending_seed_count, det_sym, det_asym,
                        deaths, recoveries, booked + state._pending_seed_daly)
    state._pending_seed_count = 0
    state._pending_seed_daly = 0.0
    state.step_index += 1
    return {"step": n_step, "new_infections": new_count, "detected_sym": det_sym,
            "detected_asym": det_asym, "deaths": deaths, "recoveries": recoveries,
            "booked_daly": booked}
