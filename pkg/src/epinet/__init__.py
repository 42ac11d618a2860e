"""Agent-based epidemic simulation with NHB economics and PPO policy search."""

__version__ = "0.1.0"

from .econ import EconConfig, PeriodAccount, health_effect, nhb, period_cost
from .epidemic import (NaturalHistory, SimParams, SimState, TransmissionTable,
                       ifr, step)
from .interventions import Npi, NpiTable, draw_compliance, interaction_strength
from .rl_env import (ActionSpec, EpidemicEnv, EpisodeConfig, NullBaseline,
                     Observation, build_null_baseline)
from .scenario import ScenarioConfig, build_bundle, estimate_r0
from .synthpop import (Agent, ContextKind, MixingContext, Population,
                       PopulationConfig, attack_rate_weighted_index_case,
                       build_population, generate_population)
from .vaccination import (AZ, PFIZER, VaccinationRecord, VaccineProfile,
                          efficacy_at, rollout_prepandemic, rollout_progressive,
                          solve_ves_ved)

__all__ = [
    "Agent", "ActionSpec", "AZ", "ContextKind", "EconConfig", "EpidemicEnv",
    "EpisodeConfig", "MixingContext", "NaturalHistory", "Npi", "NpiTable",
    "NullBaseline", "Observation", "PFIZER", "PeriodAccount", "Population",
    "PopulationConfig", "ScenarioConfig", "SimParams", "SimState",
    "TransmissionTable", "VaccinationRecord", "VaccineProfile",
    "attack_rate_weighted_index_case", "build_bundle", "build_null_baseline",
    "build_population", "draw_compliance", "efficacy_at", "estimate_r0",
    "generate_population", "health_effect", "ifr", "interaction_strength",
    "nhb", "period_cost", "rollout_prepandemic", "rollout_progressive",
    "solve_ves_ved", "step",
]
