"""Episodic MDP wrapper around the simulator.

An episode starts with imported cases seeded daily (binomial, mean one per
day) until the cumulative detected count reaches the travel-restriction
threshold; weekly social-distancing decisions start once the SD trigger
threshold is reached. Each decision fixes the SD compliance level for the
next seven days (14 engine steps). The reward of a period is

    reward_t = mean_null_loss_t - loss_t - sd_level_t * C1 / lambda

i.e. the DALY loss averted relative to a precomputed zero-SD ensemble mean,
minus the period cost in DALY units. Undiscounted episode reward therefore
equals the episode's period-wise net health benefit exactly; discounting is
the learner's concern.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import epidemic
from .econ import EconConfig, PeriodAccount, period_cost
from .epidemic import Phase, SimParams, SimState
from .interventions import NpiTable
from .rng import task_generator
from .synthpop import Population
from .vaccination import Component, ProgressiveRollout

log = logging.getLogger(__name__)

OBSERVATION_FIELDS = ("detected_incidence_sym", "detected_incidence_asym",
                      "prevalence", "cum_recoveries", "cum_fatalities")


class EpisodeAborted(RuntimeError):
    """Seeding failed to reach the trigger threshold within the allowed window."""


@dataclass(frozen=True)
class Observation:
    """Population-normalized epidemic signals available to the decision maker."""

    detected_incidence_sym: float
    detected_incidence_asym: float
    prevalence: float
    cum_recoveries: float
    cum_fatalities: float

    def vector(self) -> np.ndarray:
        return np.array([self.detected_incidence_sym, self.detected_incidence_asym,
                         self.prevalence, self.cum_recoveries, self.cum_fatalities])

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in OBSERVATION_FIELDS}


@dataclass(frozen=True)
class ActionSpec:
    """Maps a raw policy action in [0, 1] onto an SD level in [0, sd_max]."""

    sd_max: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 <= self.sd_max <= 1.0:
            raise ValueError("sd_max must be in [0, 1]")

    def sd_level(self, action: float) -> float:
        return float(action) * self.sd_max


@dataclass(frozen=True)
class EpisodeConfig:
    tr_threshold: int = 5  # cumulative detected cases ending the seeding stage
    sd_trigger_threshold: int = 5  # cumulative detected cases starting decisions
    n_decisions: int = 20  # weekly decision points t = 0..19
    decision_interval_days: int = 7
    seeding_mean_per_day: float = 1.0
    max_seed_days: int = 60
    gamma: float = 0.99  # used by the learner, not the environment

    def __post_init__(self) -> None:
        if self.tr_threshold < 1 or self.sd_trigger_threshold < 1:
            raise ValueError("thresholds must be >= 1")
        if self.decision_interval_days < 1:
            raise ValueError("decision_interval_days must be >= 1")

    @property
    def steps_per_period(self) -> int:
        return 2 * self.decision_interval_days


@dataclass
class NullBaseline:
    """Per-period mean DALY losses of the zero-SD ensemble."""

    losses: np.ndarray  # length >= n_decisions
    ensemble_size: int
    master_seed: int
    config_echo: dict = field(default_factory=dict)

    def loss_at(self, period: int) -> float:
        return float(self.losses[period])

    def save(self, path: str | Path) -> None:
        doc = {"version": 1, "losses": [float(x) for x in self.losses],
               "ensemble_size": self.ensemble_size, "master_seed": self.master_seed,
               "config_echo": self.config_echo}
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NullBaseline":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != 1:
            raise ValueError("unsupported baseline version")
        return cls(losses=np.asarray(doc["losses"], dtype=float),
                   ensemble_size=int(doc["ensemble_size"]),
                   master_seed=int(doc["master_seed"]),
                   config_echo=doc.get("config_echo", {}))


StateFactory = Callable[[np.random.Generator], SimState]


class EpidemicEnv:
    """One simulator instance exposed as an episodic decision process."""

    def __init__(self, pop: Population, params: SimParams, npi_table: NpiTable,
                 econ: EconConfig, episode: EpisodeConfig, action_spec: ActionSpec,
                 baseline: Optional[NullBaseline] = None,
                 vax_factory: Optional[Callable[[np.random.Generator], object]] = None,
                 sc_active: bool = False, strict_actions: bool = False):
        self.pop = pop
        self.params = params
        self.npi_table = npi_table
        self.econ = econ
        self.episode_config = episode
        self.action_spec = action_spec
        self.baseline = baseline
        self.vax_factory = vax_factory
        self.sc_active = sc_active
        self.strict_actions = strict_actions
        self.state: Optional[SimState] = None
        self.period: int = 0
        self.done: bool = True
        self.accounts: list[PeriodAccount] = []
        self._prev_detected_sym = 0
        self._prev_detected_asym = 0
        self._progressive: Optional[ProgressiveRollout] = None
        self._clipped_actions = 0

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int) -> Observation:
        """Start a new episode: seed imported cases until the trigger fires.

        Raises EpisodeAborted if the detected count does not reach the
        travel-restriction threshold within `max_seed_days` days.
        """
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        vax = None
        self._progressive = None
        if self.vax_factory is not None:
            rollout = self.vax_factory(rng)
            if isinstance(rollout, ProgressiveRollout):
                self._progressive = rollout
                vax = rollout.state
            else:
                vax = rollout
        self.state = SimState(self.pop, self.params, self.npi_table, vax, rng,
                              sc_active=self.sc_active)
        self.period = 0
        self.done = False
        self.accounts = []
        self._prev_detected_sym = 0
        self._prev_detected_asym = 0

        ec = self.episode_config
        day = 0
        while self.state.cum_detected < ec.tr_threshold:
            if day >= ec.max_seed_days:
                raise EpisodeAborted(
                    f"seeding did not reach {ec.tr_threshold} detected cases "
                    f"within {ec.max_seed_days} days")
            self._seed_day(day)
            self._run_day(day, sd_level=0.0)
            day += 1
        # wait (without further imports) for the SD trigger if it is higher
        while self.state.cum_detected < ec.sd_trigger_threshold:
            if day >= 4 * ec.max_seed_days:
                raise EpisodeAborted("SD trigger threshold unreachable")
            self._run_day(day, sd_level=0.0)
            day += 1
        return self._observe()

    def _seed_day(self, day: int) -> None:
        st = self.state
        p = min(1.0, self.episode_config.seeding_mean_per_day / self.pop.n_agents)
        k = st.rng.binomial(self.pop.n_agents, p)
        if k <= 0:
            return
        sus = np.flatnonzero(st.phase == Phase.SUSCEPTIBLE)
        if sus.size == 0:
            return
        pick = st.rng.choice(sus, size=min(k, sus.size), replace=False)
        epidemic.seed_infections(st, pick)

    def _run_day(self, day: int, sd_level: float) -> None:
        if self._progressive is not None:
            self._progressive.apply_day(day)
        epidemic.step(self.state, sd_level)
        epidemic.step(self.state, sd_level)

    def step(self, action: float | None = None, sd_level: float | None = None
             ) -> tuple[Observation, float, bool, PeriodAccount]:
        """Simulate one decision period at the requested SD level.

        Exactly one of `action` (raw, in [0, 1]) or `sd_level` must be given;
        out-of-range values are clipped and counted unless strict mode is on.
        """
        if self.done or self.state is None:
            raise RuntimeError("episode is finished; call reset() first")
        if (action is None) == (sd_level is None):
            raise ValueError("pass exactly one of action= or sd_level=")
        if sd_level is None:
            sd_level = self.action_spec.sd_level(action)
        lo, hi = 0.0, self.action_spec.sd_max
        if not lo <= sd_level <= hi:
            if self.strict_actions:
                raise ValueError(f"sd_level {sd_level} outside [0, {hi}]")
            self._clipped_actions += 1
            log.debug("clipping sd_level %.4f into [0, %.2f]", sd_level, hi)
            sd_level = float(np.clip(sd_level, lo, hi))

        st = self.state
        ledger_start = st.ledger.n_steps
        day0 = st.day
        for d in range(self.episode_config.decision_interval_days):
            self._run_day(day0 + d, sd_level)
        loss = float(np.sum(st.ledger.booked_daly[ledger_start:]))

        loss_null = self.baseline.loss_at(self.period) if self.baseline is not None else 0.0
        cost = period_cost(sd_level, self.econ) * (
            self.episode_config.decision_interval_days / 7.0)
        reward = loss_null - loss - cost / self.econ.lam
        account = PeriodAccount(period=self.period, sd_level=sd_level,
                                loss_null=loss_null, loss_controlled=loss,
                                cost=cost, reward=reward)
        self.accounts.append(account)
        self.period += 1
        self.done = self.period >= self.episode_config.n_decisions
        return self._observe(), reward, self.done, account

    # -- observation ---------------------------------------------------------

    def _observe(self) -> Observation:
        st = self.state
        n = float(self.pop.n_agents)
        det_sym = int(np.sum(st.ledger.detected_sym))
        det_asym = int(np.sum(st.ledger.detected_asym))
        obs = Observation(
            detected_incidence_sym=(det_sym - self._prev_detected_sym) / n,
            detected_incidence_asym=(det_asym - self._prev_detected_asym) / n,
            prevalence=st.n_infected / n,
            cum_recoveries=st.cum_recoveries / n,
            cum_fatalities=st.cum_deaths / n,
        )
        self._prev_detected_sym = det_sym
        self._prev_detected_asym = det_asym
        return obs

    # -- episode-level accounting ---------------------------------------------

    def period_losses(self) -> list[float]:
        return [a.loss_controlled for a in self.accounts]

    def episode_reward(self) -> float:
        return float(sum(a.reward for a in self.accounts))


def run_zero_sd_episode(env: EpidemicEnv, seed: int) -> list[float]:
    """Per-period booked DALY losses of one zero-SD episode."""
    env.reset(seed)
    losses = []
    done = False
    while not done:
        _, _, done, account = env.step(sd_level=0.0)
        losses.append(account.loss_controlled)
    return losses


def build_null_baseline(env_factory: Callable[[], EpidemicEnv], ensemble_size: int,
                        master_seed: int, config_echo: dict | None = None) -> NullBaseline:
    """Average per-period zero-SD losses over an episode ensemble.

    Episode k uses the seed stream spawned for task k from `master_seed`, the
    same derivation `episode_seed` uses, so a single-member ensemble (K=1)
    reproduces the matching environment episode exactly.
    """
    if ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")
    env = env_factory()
    rows = []
    for k in range(ensemble_size):
        rows.append(run_zero_sd_episode(env, episode_seed(master_seed, k)))
    losses = np.mean(np.asarray(rows), axis=0)
    return NullBaseline(losses=losses, ensemble_size=ensemble_size,
                        master_seed=master_seed, config_echo=config_echo or {})


def episode_seed(master_seed: int, index: int) -> int:
    """Stable per-episode seed derived from a master seed."""
    return int(task_generator(master_seed, index).integers(0, 2**63 - 1))
