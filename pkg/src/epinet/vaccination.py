"""Two-dose vaccination: rollout modes and time-varying efficacy.

Two brands are modelled (AZ-style and Pfizer-style profiles). Each efficacy
component ramps linearly from the day a dose is taken to that dose's maximum,
then holds; efficacy never wanes within the simulated horizon.

Components:
  VEs  efficacy against susceptibility (protects the exposed agent)
  VEi  efficacy against infectiousness (reduces onward transmission)
  VEd  efficacy against disease (reduces symptomatic probability)
  VEp  efficacy against death (reduces the infection fatality rate)
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .synthpop import Population

log = logging.getLogger(__name__)


class Component(str, enum.Enum):
    VES = "ves"
    VED = "ved"
    VEI = "vei"
    VEP = "vep"


class RolloutMode(str, enum.Enum):
    PROGRESSIVE = "progressive"
    PRE_PANDEMIC = "pre_pandemic"


def solve_ves_ved(vec: float) -> float:
    """Split a clinical efficacy into equal VEs = VEd components.

    Solves vec = 1 - (1 - VEs)(1 - VEd) under VEs = VEd, giving the central
    estimate 1 - sqrt(1 - vec).
    """
    if not 0.0 <= vec < 1.0:
        raise ValueError(f"clinical efficacy must be in [0, 1), got {vec}")
    return 1.0 - math.sqrt(1.0 - vec)


@dataclass(frozen=True)
class VaccineProfile:
    brand: str
    ramp_dose1_days: float  # days from dose 1 to full dose-1 protection
    min_delay_days: float   # minimum days between doses
    ramp_dose2_days: float  # days from dose 2 to full dose-2 protection
    ves: tuple[float, float]  # (after dose 1, after dose 2)
    ved: tuple[float, float]
    vei: tuple[float, float]
    vep: tuple[float, float]

    def __post_init__(self) -> None:
        for name in ("ves", "ved", "vei", "vep"):
            d1, d2 = getattr(self, name)
            if not (0.0 <= d1 <= 1.0 and 0.0 <= d2 <= 1.0):
                raise ValueError(f"{name} maxima must lie in [0, 1]")
        for name in ("vei", "vep"):
            d1, d2 = getattr(self, name)
            if d2 < d1:
                raise ValueError(f"{name} dose-2 maximum must be >= dose-1 maximum")

    def maxima(self, component: Component) -> tuple[float, float]:
        return getattr(self, component.value)


# AZ clinical efficacy 0.6 after either dose; Pfizer 0.7 / 0.9.
_AZ_VESD = round(solve_ves_ved(0.6), 3)      # 0.368
_PF_VESD_1 = round(solve_ves_ved(0.7), 3)    # 0.452
_PF_VESD_2 = round(solve_ves_ved(0.9), 3)    # 0.684

AZ = VaccineProfile(
    brand="az", ramp_dose1_days=21, min_delay_days=28, ramp_dose2_days=14,
    ves=(_AZ_VESD, _AZ_VESD), ved=(_AZ_VESD, _AZ_VESD),
    vei=(0.45, 0.50), vep=(0.69, 0.90),
)
PFIZER = VaccineProfile(
    brand="pfizer", ramp_dose1_days=14, min_delay_days=21, ramp_dose2_days=7,
    ves=(_PF_VESD_1, _PF_VESD_2), ved=(_PF_VESD_1, _PF_VESD_2),
    vei=(0.45, 0.50), vep=(0.71, 0.92),
)
PROFILES = {"az": AZ, "pfizer": PFIZER}


@dataclass(frozen=True)
class VaccinationRecord:
    brand: str
    dose1_day: Optional[float] = None
    dose2_day: Optional[float] = None
    mode: RolloutMode = RolloutMode.PROGRESSIVE

    def __post_init__(self) -> None:
        if self.dose2_day is not None:
            if self.dose1_day is None:
                raise ValueError("dose 2 requires dose 1")
            delay = PROFILES[self.brand].min_delay_days
            if self.dose2_day - self.dose1_day < delay - 1e-9:
                raise ValueError("doses closer than the brand's minimum delay")


def efficacy_at(component: Component, record: Optional[VaccinationRecord],
                profile: Optional[VaccineProfile], day: float) -> float:
    """Efficacy of one component for one agent on a given day.

    Piecewise linear: 0 before dose 1, ramp to the dose-1 maximum, hold,
    ramp from the value at dose-2 time to the dose-2 maximum, hold.
    Pre-pandemic records are already at the dose-2 maximum on day 0.
    """
    if record is None or record.dose1_day is None:
        return 0.0
    profile = profile or PROFILES[record.brand]
    max1, max2 = profile.maxima(component)
    if record.mode is RolloutMode.PRE_PANDEMIC:
        return max2
    if day < record.dose1_day:
        return 0.0
    ramp1_end = record.dose1_day + profile.ramp_dose1_days
    if day < ramp1_end:
        return max1 * (day - record.dose1_day) / profile.ramp_dose1_days
    if record.dose2_day is None or day < record.dose2_day:
        return max1
    base = max1  # the dose-1 ramp is always complete before dose 2 is allowed
    ramp2_end = record.dose2_day + profile.ramp_dose2_days
    if day < ramp2_end:
        return base + (max2 - base) * (day - record.dose2_day) / profile.ramp_dose2_days
    return max2


class VaccinationState:
    """Vectorized per-agent dose records with cached per-day efficacy arrays."""

    def __init__(self, n_agents: int):
        self.n_agents = n_agents
        self.brand = np.full(n_agents, -1, dtype=np.int8)  # -1 none, 0 az, 1 pfizer
        self.dose1_day = np.full(n_agents, np.nan)
        self.dose2_day = np.full(n_agents, np.nan)
        self.pre_pandemic = np.zeros(n_agents, dtype=bool)
        self._cache_day: Optional[float] = None
        self._cache: Optional[dict[Component, np.ndarray]] = None

    def give_dose(self, agents: np.ndarray, brand_codes: np.ndarray, day: float,
                  dose: int) -> None:
        if dose == 1:
            self.brand[agents] = brand_codes
            self.dose1_day[agents] = day
        else:
            self.dose2_day[agents] = day
        self._cache_day = None

    def _is_static(self) -> bool:
        """Efficacies are time-invariant when every record is pre-pandemic."""
        covered = self.brand >= 0
        return bool(self.pre_pandemic[covered].all())

    def component_array(self, component: Component, day: float) -> np.ndarray:
        if self._cache_day == "static":
            return self._cache[component]
        if self._cache_day != day:
            self._cache = {c: self._compute(c, day) for c in Component}
            self._cache_day = "static" if self._is_static() else day
        return self._cache[component]

    def _compute(self, component: Component, day: float) -> np.ndarray:
        out = np.zeros(self.n_agents)
        for code, profile in ((0, AZ), (1, PFIZER)):
            sel = self.brand == code
            if not sel.any():
                continue
            max1, max2 = profile.maxima(component)
            d1 = self.dose1_day[sel]
            d2 = self.dose2_day[sel]
            v = np.zeros(sel.sum())
            dosed = ~np.isnan(d1) & (day >= d1)
            ramp1 = np.clip((day - d1) / profile.ramp_dose1_days, 0.0, 1.0)
            v[dosed] = (max1 * ramp1)[dosed]
            boosted = ~np.isnan(d2) & (day >= d2)
            ramp2 = np.clip(
                np.where(np.isnan(d2), 0.0, (day - d2) / profile.ramp_dose2_days), 0.0, 1.0)
            v[boosted] = (max1 + (max2 - max1) * ramp2)[boosted]
            v[self.pre_pandemic[sel]] = max2
            out[sel] = v
        return out

    def records(self) -> list[Optional[VaccinationRecord]]:
        out: list[Optional[VaccinationRecord]] = []
        mode = {True: RolloutMode.PRE_PANDEMIC, False: RolloutMode.PROGRESSIVE}
        for i in range(self.n_agents):
            if self.brand[i] < 0:
                out.append(None)
                continue
            out.append(VaccinationRecord(
                brand="az" if self.brand[i] == 0 else "pfizer",
                dose1_day=None if np.isnan(self.dose1_day[i]) else float(self.dose1_day[i]),
                dose2_day=None if np.isnan(self.dose2_day[i]) else float(self.dose2_day[i]),
                mode=mode[bool(self.pre_pandemic[i])],
            ))
        return out


def rollout_prepandemic(pop: Population, rng: np.random.Generator,
                        coverage: float = 0.85) -> VaccinationState:
    """Fully vaccinate a population fraction before the outbreak starts.

    Each agent is covered independently with probability `coverage`.
    Agents under 16 receive the Pfizer-style vaccine only; 16+ split the two
    brands evenly. All covered agents hold dose-2 protection from day 0.
    """
    if not 0.0 <= coverage <= 1.0:
        raise ValueError("coverage must be in [0, 1]")
    state = VaccinationState(pop.n_agents)
    covered = np.flatnonzero(rng.random(pop.n_agents) < coverage)
    if covered.size == 0:
        return state
    brands = np.where(pop.ages[covered] < 16, 1, (rng.random(covered.size) < 0.5).astype(int))
    state.brand[covered] = brands.astype(np.int8)
    # nominal historical dose days; efficacy shortcuts to the dose-2 maximum
    state.dose1_day[covered] = -365.0
    state.dose2_day[covered] = -300.0
    state.pre_pandemic[covered] = True
    return state


@dataclass(frozen=True)
class DoseScheduleRow:
    day: int
    dose1_count: int
    dose2_count: int


def load_dose_schedule(path: str | Path) -> list[DoseScheduleRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(DoseScheduleRow(
                day=int(rec["date_offset_days"]),
                dose1_count=int(rec["dose1_count"]),
                dose2_count=int(rec["dose2_count"]),
            ))
    return rows


def save_dose_schedule(rows: Iterable[DoseScheduleRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date_offset_days", "dose1_count", "dose2_count"])
        for r in rows:
            w.writerow([r.day, r.dose1_count, r.dose2_count])


def synthetic_dose_schedule(n_agents: int, days: int = 120,
                            coverage: float = 0.8) -> list[DoseScheduleRow]:
    """A ramped first-dose schedule with second doses following at the
    Pfizer minimum delay; useful for validation-style scenarios without
    external data."""
    total_d1 = int(round(coverage * n_agents))
    per_day = max(1, total_d1 // max(1, days - 30))
    rows = []
    given = 0
    for d in range(days):
        d1 = min(per_day, max(0, total_d1 - given))
        given += d1
        d2 = rows[d - 21].dose1_count if d >= 21 else 0
        rows.append(DoseScheduleRow(day=d, dose1_count=d1, dose2_count=d2))
    return rows


# Age-priority buckets for scarce progressive doses: oldest first.
_PRIORITY_BOUNDS = [(70, 200), (50, 69), (16, 49), (12, 15)]


class ProgressiveRollout:
    """Assigns scheduled daily doses to agents, oldest priority group first.

    Dose-2 demand that cannot be met (nobody past the brand's minimum delay)
    is deferred to the next day; dose-1 demand beyond the eligible pool is
    dropped with a warning.
    """

    def __init__(self, pop: Population, schedule: list[DoseScheduleRow],
                 rng: np.random.Generator, min_age: int = 12):
        self.pop = pop
        self.schedule = {r.day: r for r in schedule}
        self.rng = rng
        self.min_age = min_age
        self.state = VaccinationState(pop.n_agents)
        self.deferred_dose2 = 0
        self.dropped_dose1 = 0
        self.dropped_dose2 = 0
        self.last_day = max(self.schedule) if self.schedule else -1

    def apply_day(self, day: int) -> None:
        row = self.schedule.get(day)
        d1 = row.dose1_count if row else 0
        d2 = (row.dose2_count if row else 0) + self.deferred_dose2
        self.deferred_dose2 = 0
        if d1 > 0:
            self._dose1(d1, day)
        if d2 > 0:
            self._dose2(d2, day)

    def _dose1(self, count: int, day: int) -> None:
        ages = self.pop.ages
        unvaccinated = self.state.brand < 0
        for lo, hi in _PRIORITY_BOUNDS:
            if count <= 0:
                break
            if lo < self.min_age:
                continue
            pool = np.flatnonzero(unvaccinated & (ages >= lo) & (ages <= hi))
            if pool.size == 0:
                continue
            take = self.rng.permutation(pool)[: min(count, pool.size)]
            brands = np.where(ages[take] < 16, 1,
                              (self.rng.random(take.size) < 0.5).astype(int))
            self.state.give_dose(take, brands.astype(np.int8), float(day), dose=1)
            unvaccinated[take] = False
            count -= take.size
        if count > 0:
            self.dropped_dose1 += count
            log.warning("dose-1 schedule exhausts eligible agents on day %d: %d doses dropped",
                        day, count)

    def _dose2(self, count: int, day: int) -> None:
        st = self.state
        waiting = np.flatnonzero((st.brand >= 0) & np.isnan(st.dose2_day))
        if waiting.size:
            delay = np.where(st.brand[waiting] == 0, AZ.min_delay_days, PFIZER.min_delay_days)
            ready = waiting[day - st.dose1_day[waiting] >= delay]
        else:
            ready = waiting
        if ready.size:
            # oldest first, matching the dose-1 priority
            ready = ready[np.argsort(-self.pop.ages[ready], kind="stable")]
            take = ready[: min(count, ready.size)]
            st.give_dose(take, st.brand[take], float(day), dose=2)
            count -= take.size
        if count > 0:
            if day <= self.last_day:
                self.deferred_dose2 += count
                log.debug("deferring %d dose-2 shots from day %d", count, day)
            else:
                self.dropped_dose2 += count
                log.warning("dose-2 schedule exhausted on day %d: %d doses dropped", day, count)


def rollout_progressive(pop: Population, schedule: list[DoseScheduleRow],
                        rng: np.random.Generator) -> ProgressiveRollout:
    return ProgressiveRollout(pop, schedule, rng)
