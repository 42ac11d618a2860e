"""Non-pharmaceutical interventions as per-agent, per-step compliance draws.

Four NPIs are modelled: case isolation (CI), home quarantine (HQ), social
distancing (SD) and school closure (SC). Compliance is redrawn every 12-hour
step, so adherence fluctuates over time and across agents. A compliant agent
follows exactly one NPI, resolved by the fixed precedence CI > HQ > SD > SC,
and that NPI rescales the agent's interaction strength per mixing context.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .synthpop import ContextKind, Population


class Npi(enum.IntEnum):
    NONE = 0
    CI = 1
    HQ = 2
    SD = 3
    SC_CHILD = 4
    SC_PARENT = 5


_KIND_ORDER = [
    ContextKind.HOUSEHOLD,
    ContextKind.HOUSEHOLD_CLUSTER,
    ContextKind.WORK_GROUP,
    ContextKind.SCHOOL_CLASS,
    ContextKind.GRADE,
    ContextKind.SCHOOL,
    ContextKind.NEIGHBORHOOD,
    ContextKind.COMMUNITY,
]
KIND_INDEX = {k: i for i, k in enumerate(_KIND_ORDER)}

# Interaction strengths per (NPI, context kind). HQ deliberately amplifies
# household interactions (2.0): quarantined members spend more time at home.
_DEFAULT_STRENGTHS = {
    Npi.NONE:      {k: 1.0 for k in _KIND_ORDER},
    Npi.CI:        {ContextKind.HOUSEHOLD: 1.0, ContextKind.HOUSEHOLD_CLUSTER: 0.25,
                    ContextKind.WORK_GROUP: 0.25, ContextKind.SCHOOL_CLASS: 0.25,
                    ContextKind.GRADE: 0.25, ContextKind.SCHOOL: 0.25,
                    ContextKind.NEIGHBORHOOD: 0.25, ContextKind.COMMUNITY: 0.25},
    Npi.HQ:        {ContextKind.HOUSEHOLD: 2.0, ContextKind.HOUSEHOLD_CLUSTER: 0.25,
                    ContextKind.WORK_GROUP: 0.25, ContextKind.SCHOOL_CLASS: 0.25,
                    ContextKind.GRADE: 0.25, ContextKind.SCHOOL: 0.25,
                    ContextKind.NEIGHBORHOOD: 0.25, ContextKind.COMMUNITY: 0.25},
    Npi.SD:        {ContextKind.HOUSEHOLD: 1.0, ContextKind.HOUSEHOLD_CLUSTER: 0.25,
                    ContextKind.WORK_GROUP: 0.1, ContextKind.SCHOOL_CLASS: 0.1,
                    ContextKind.GRADE: 0.1, ContextKind.SCHOOL: 0.1,
                    ContextKind.NEIGHBORHOOD: 0.25, ContextKind.COMMUNITY: 0.25},
    Npi.SC_CHILD:  {ContextKind.HOUSEHOLD: 1.0, ContextKind.HOUSEHOLD_CLUSTER: 0.5,
                    ContextKind.WORK_GROUP: 1.0, ContextKind.SCHOOL_CLASS: 0.0,
                    ContextKind.GRADE: 0.0, ContextKind.SCHOOL: 0.0,
                    ContextKind.NEIGHBORHOOD: 0.5, ContextKind.COMMUNITY: 0.5},
    Npi.SC_PARENT: {ContextKind.HOUSEHOLD: 1.0, ContextKind.HOUSEHOLD_CLUSTER: 0.5,
                    ContextKind.WORK_GROUP: 0.0, ContextKind.SCHOOL_CLASS: 1.0,
                    ContextKind.GRADE: 1.0, ContextKind.SCHOOL: 1.0,
                    ContextKind.NEIGHBORHOOD: 0.5, ContextKind.COMMUNITY: 0.5},
}


@dataclass(frozen=True)
class NpiTable:
    """Interaction strengths and baseline compliance levels for all NPIs.

    The SD compliance level is not part of the table: it is the control
    variable steered by a policy, supplied per step.
    """

    ci_compliance: float = 0.7
    hq_compliance: float = 0.5
    sc_child_compliance: float = 1.0
    sc_parent_compliance: float = 0.25
    hq_duration_days: float = 14.0  # eligibility window after a detection
    strengths: dict[Npi, dict[ContextKind, float]] = field(
        default_factory=lambda: {n: dict(v) for n, v in _DEFAULT_STRENGTHS.items()}
    )

    def __post_init__(self) -> None:
        for npi, row in self.strengths.items():
            for kind, v in row.items():
                if v < 0:
                    raise ValueError(f"negative interaction strength for {npi.name}/{kind.value}")

    def strength_matrix(self) -> np.ndarray:
        """Array F[npi, kind] for the engine's vectorized lookups."""
        m = np.ones((len(Npi), len(_KIND_ORDER)))
        for npi, row in self.strengths.items():
            for kind, v in row.items():
                m[int(npi), KIND_INDEX[kind]] = v
        return m

    def to_json_dict(self) -> dict:
        return {
            "compliance": {
                "ci": self.ci_compliance,
                "hq": self.hq_compliance,
                "sc_child": self.sc_child_compliance,
                "sc_parent": self.sc_parent_compliance,
            },
            "hq_duration_days": self.hq_duration_days,
            "strengths": {
                npi.name.lower(): {k.value: v for k, v in row.items()}
                for npi, row in self.strengths.items()
                if npi is not Npi.NONE
            },
        }

    @classmethod
    def from_json_file(cls, path: str | Path) -> "NpiTable":
        """Load a table overriding any subset of the embedded defaults."""
        doc = json.loads(Path(path).read_text())
        table = cls()
        comp = doc.get("compliance", {})
        table = replace(
            table,
            ci_compliance=comp.get("ci", table.ci_compliance),
            hq_compliance=comp.get("hq", table.hq_compliance),
            sc_child_compliance=comp.get("sc_child", table.sc_child_compliance),
            sc_parent_compliance=comp.get("sc_parent", table.sc_parent_compliance),
            hq_duration_days=doc.get("hq_duration_days", table.hq_duration_days),
        )
        strengths = {n: dict(v) for n, v in table.strengths.items()}
        for npi_name, row in doc.get("strengths", {}).items():
            npi = Npi[npi_name.upper()]
            for kind_name, v in row.items():
                strengths[npi][ContextKind(kind_name)] = float(v)
        return replace(table, strengths=strengths)


@dataclass
class ComplianceFlags:
    """Per-agent flags for one step, plus the precedence-resolved NPI."""

    ci: np.ndarray
    hq: np.ndarray
    sd: np.ndarray
    sc: np.ndarray
    effective: np.ndarray  # Npi codes, SC split into child/parent


def resolve_effective(ci: np.ndarray, hq: np.ndarray, sd: np.ndarray, sc: np.ndarray,
                      is_student: np.ndarray) -> np.ndarray:
    """Apply the CI > HQ > SD > SC precedence to raw draws."""
    eff = np.where(sc, np.where(is_student, np.int8(Npi.SC_CHILD), np.int8(Npi.SC_PARENT)),
                   np.int8(Npi.NONE))
    eff = np.where(sd, np.int8(Npi.SD), eff)
    eff = np.where(hq, np.int8(Npi.HQ), eff)
    eff = np.where(ci, np.int8(Npi.CI), eff)
    return eff.astype(np.int8)


def draw_compliance(
    pop: Population,
    table: NpiTable,
    sd_level: float,
    rng: np.random.Generator,
    ci_eligible: np.ndarray | None = None,
    hq_eligible: np.ndarray | None = None,
    sc_active: bool = False,
) -> ComplianceFlags:
    """Redraw compliance for every agent for one step.

    CI draws apply only to detected symptomatic active cases, HQ to current
    members of a quarantined household, SD to everyone, SC to students and
    the household's designated parent (when school closures are active).

    Raises ValueError if sd_level is outside [0, 1].
    """
    if not 0.0 <= sd_level <= 1.0:
        raise ValueError(f"sd_level must be in [0, 1], got {sd_level}")
    n = pop.n_agents
    u = rng.random((4, n))
    ci = np.zeros(n, dtype=bool) if ci_eligible is None else (ci_eligible & (u[0] < table.ci_compliance))
    hq = np.zeros(n, dtype=bool) if hq_eligible is None else (hq_eligible & (u[1] < table.hq_compliance))
    sd = u[2] < sd_level
    is_student = pop.class_id >= 0
    if sc_active:
        sc = (is_student & (u[3] < table.sc_child_compliance)) | (
            pop.sc_parent & (u[3] < table.sc_parent_compliance))
    else:
        sc = np.zeros(n, dtype=bool)
    return ComplianceFlags(ci=ci, hq=hq, sd=sd, sc=sc,
                           effective=resolve_effective(ci, hq, sd, sc, is_student))


def interaction_strength(table: NpiTable, effective: int | Npi, kind: ContextKind) -> float:
    """F_g(j): the source agent's interaction strength in context g."""
    return table.strengths[Npi(int(effective))].get(kind, 1.0)
