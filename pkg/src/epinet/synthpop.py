"""Synthetic town population with nested mixing contexts.

Generates agents (age, life expectancy) and the contact-group structure the
transmission engine operates on: households grouped into household clusters,
neighborhoods, one or more communities (night-time mixing), plus working
groups for adults and class/grade/school triples for students (day-time
mixing).

No census data is ingested; everything is parametric and reproducible from
`PopulationConfig.rng_seed`.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

POPULATION_SCHEMA_VERSION = 1

#: Age-group edges used by the index-case sampler and reporting:
#: [0-4, 5-18, 19-29, 30-64, 65+]
AGE_GROUP_EDGES = np.array([0, 5, 19, 30, 65])

#: Recipient age groups used by neighborhood/community transmission rows:
#: [0-4, 5-18, 19-64, 65+]
RECIPIENT_GROUP_EDGES = np.array([0, 5, 19, 65])


class ContextKind(str, enum.Enum):
    HOUSEHOLD = "household"
    HOUSEHOLD_CLUSTER = "household_cluster"
    WORK_GROUP = "work_group"
    SCHOOL_CLASS = "school_class"
    GRADE = "grade"
    SCHOOL = "school"
    NEIGHBORHOOD = "neighborhood"
    COMMUNITY = "community"


#: Contexts active during the 12-hour daytime cycle; all others are night.
DAY_KINDS = frozenset(
    {ContextKind.WORK_GROUP, ContextKind.SCHOOL_CLASS, ContextKind.GRADE, ContextKind.SCHOOL}
)


def active_cycle(kind: ContextKind) -> str:
    return "day" if kind in DAY_KINDS else "night"


@dataclass(frozen=True)
class Agent:
    """One simulated person and their context memberships."""

    id: int
    age: int
    life_expectancy: float
    household: int
    household_cluster: int
    neighborhood: int
    community: int
    work_group: Optional[int] = None
    school_class: Optional[int] = None
    grade: Optional[int] = None
    school: Optional[int] = None
    sc_parent: bool = False  # designated stay-home parent for school closures

    @property
    def is_adult_transmission(self) -> bool:
        """Adult for transmission-table lookup (19+)."""
        return self.age >= 19

    @property
    def is_adult_clinical(self) -> bool:
        """Adult for the symptomatic fraction (18+)."""
        return self.age >= 18

    @property
    def home_contexts(self) -> list[tuple[ContextKind, int]]:
        return [
            (ContextKind.HOUSEHOLD, self.household),
            (ContextKind.HOUSEHOLD_CLUSTER, self.household_cluster),
            (ContextKind.NEIGHBORHOOD, self.neighborhood),
            (ContextKind.COMMUNITY, self.community),
        ]

    @property
    def day_context(self) -> list[tuple[ContextKind, int]]:
        if self.work_group is not None:
            return [(ContextKind.WORK_GROUP, self.work_group)]
        if self.school_class is not None:
            return [
                (ContextKind.SCHOOL_CLASS, self.school_class),
                (ContextKind.GRADE, self.grade),
                (ContextKind.SCHOOL, self.school),
            ]
        return []


@dataclass(frozen=True)
class MixingContext:
    """A contact group: all transmission happens inside these."""

    id: int
    kind: ContextKind
    members: tuple[int, ...]

    @property
    def active_cycle(self) -> str:
        return active_cycle(self.kind)


def default_age_distribution(age_max: int = 84) -> np.ndarray:
    """By-single-year age weights.

    Bucket masses loosely follow the Australian age pyramid
    (0-4: 6%, 5-18: 17%, 19-29: 14%, 30-64: 46%, 65+: 17%),
    uniform within each bucket.
    """
    masses = [0.06, 0.17, 0.14, 0.46, 0.17]
    edges = [0, 5, 19, 30, 65, age_max + 1]
    w = np.zeros(age_max + 1)
    for m, lo, hi in zip(masses, edges[:-1], edges[1:]):
        w[lo:hi] = m / (hi - lo)
    return w / w.sum()


def default_household_size_distribution() -> dict[int, float]:
    """Uniform over sizes 2..6 so every household transmission row is exercised."""
    return {s: 0.2 for s in range(2, 7)}


@dataclass(frozen=True)
class PopulationConfig:
    """Parameters of the synthetic town.

    Context sizes are calibrated so that the default town reproduces the
    target basic reproduction number under the default transmission scalar;
    see README for the calibration summary.
    """

    n_agents: int = 2393
    age_distribution: Optional[np.ndarray] = None  # by single year; default pyramid
    life_expectancy: float = 82.5  # flat; or a by-age array via life_expectancy_table
    life_expectancy_table: Optional[np.ndarray] = None
    # residual years floor: agents older than the flat value still have some
    # expected remaining lifetime (keeps life_expectancy > age everywhere)
    min_residual_years: float = 2.0
    household_size_distribution: Optional[dict[int, float]] = None  # default uniform 2..6
    cluster_size: int = 4  # households per household cluster
    workgroup_size: int = 45
    class_size: int = 25
    classes_per_grade: int = 3
    grades_per_school: int = 3
    neighborhood_size: int = 250
    community_size: int = 0  # 0 = one community spanning the whole town
    employment_rate: float = 1.0  # of adults aged 19-64
    school_enrollment_rate: float = 1.0  # of children aged 5-18
    rng_seed: int = 0

    def resolved_age_distribution(self) -> np.ndarray:
        if self.age_distribution is not None:
            w = np.asarray(self.age_distribution, dtype=float)
            if (w < 0).any() or w.sum() <= 0:
                raise ValueError("age_distribution must be non-negative with positive mass")
            return w / w.sum()
        return default_age_distribution()

    def resolved_household_sizes(self) -> tuple[np.ndarray, np.ndarray]:
        dist = self.household_size_distribution or default_household_size_distribution()
        sizes = np.array(sorted(dist), dtype=int)
        probs = np.array([dist[s] for s in sizes], dtype=float)
        if (sizes < 1).any() or (sizes > 6).any():
            raise ValueError("household sizes must be within [1, 6]")
        if (probs < 0).any() or not np.isclose(probs.sum(), 1.0, atol=1e-9):
            raise ValueError("household size probabilities must be >= 0 and sum to 1")
        return sizes, probs

    def life_expectancy_at(self, ages: np.ndarray) -> np.ndarray:
        if self.life_expectancy_table is not None:
            table = np.asarray(self.life_expectancy_table, dtype=float)
            idx = np.minimum(ages, len(table) - 1)
            base = table[idx]
        else:
            base = np.full(len(ages), float(self.life_expectancy))
        return np.maximum(base, ages + self.min_residual_years)

    def validate(self) -> None:
        if self.n_agents < 50:
            raise ValueError("n_agents must be >= 50 to form every context kind")
        for name in ("cluster_size", "workgroup_size", "class_size",
                     "classes_per_grade", "grades_per_school", "neighborhood_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.community_size < 0:
            raise ValueError("community_size must be >= 0 (0 = single community)")
        for name in ("employment_rate", "school_enrollment_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        self.resolved_age_distribution()
        self.resolved_household_sizes()


# Array-of-struct view used by the simulation engine; built once per
# population and immutable afterwards (safe to share across episodes).
@dataclass
class Population:
    config: PopulationConfig
    ages: np.ndarray
    life_expectancy: np.ndarray
    household_id: np.ndarray
    household_size: np.ndarray
    cluster_id: np.ndarray
    neighborhood_id: np.ndarray
    community_id: np.ndarray
    workgroup_id: np.ndarray  # -1 for none
    class_id: np.ndarray  # -1 for none
    grade_id: np.ndarray
    school_id: np.ndarray
    sc_parent: np.ndarray  # bool
    # derived lookups
    adult_transmission: np.ndarray = field(init=False)  # age >= 19
    adult_clinical: np.ndarray = field(init=False)  # age >= 18
    recipient_group: np.ndarray = field(init=False)  # 0-4 / 5-18 / 19-64 / 65+
    n_households: int = field(init=False)
    n_clusters: int = field(init=False)
    n_neighborhoods: int = field(init=False)
    n_communities: int = field(init=False)

    def __post_init__(self) -> None:
        self.adult_transmission = self.ages >= 19
        self.adult_clinical = self.ages >= 18
        self.recipient_group = (
            np.searchsorted(RECIPIENT_GROUP_EDGES, self.ages, side="right") - 1
        ).astype(np.int64)
        self.n_households = int(self.household_id.max()) + 1
        self.n_clusters = int(self.cluster_id.max()) + 1
        self.n_neighborhoods = int(self.neighborhood_id.max()) + 1
        self.n_communities = int(self.community_id.max()) + 1
        for arr in (self.ages, self.household_id, self.cluster_id, self.neighborhood_id,
                    self.community_id, self.workgroup_id, self.class_id, self.grade_id,
                    self.school_id, self.sc_parent, self.life_expectancy,
                    self.household_size):
            arr.setflags(write=False)

    @property
    def n_agents(self) -> int:
        return len(self.ages)

    def age_group(self) -> np.ndarray:
        """Five-bucket group index [0-4, 5-18, 19-29, 30-64, 65+] per agent."""
        return (np.searchsorted(AGE_GROUP_EDGES, self.ages, side="right") - 1).astype(np.int64)

    def agents(self) -> list[Agent]:
        out = []
        for i in range(self.n_agents):
            wg = int(self.workgroup_id[i])
            cl = int(self.class_id[i])
            out.append(Agent(
                id=i,
                age=int(self.ages[i]),
                life_expectancy=float(self.life_expectancy[i]),
                household=int(self.household_id[i]),
                household_cluster=int(self.cluster_id[i]),
                neighborhood=int(self.neighborhood_id[i]),
                community=int(self.community_id[i]),
                work_group=wg if wg >= 0 else None,
                school_class=cl if cl >= 0 else None,
                grade=int(self.grade_id[i]) if cl >= 0 else None,
                school=int(self.school_id[i]) if cl >= 0 else None,
                sc_parent=bool(self.sc_parent[i]),
            ))
        return out

    def contexts(self) -> list[MixingContext]:
        out: list[MixingContext] = []
        for kind, ids in (
            (ContextKind.HOUSEHOLD, self.household_id),
            (ContextKind.HOUSEHOLD_CLUSTER, self.cluster_id),
            (ContextKind.WORK_GROUP, self.workgroup_id),
            (ContextKind.SCHOOL_CLASS, self.class_id),
            (ContextKind.GRADE, self.grade_id),
            (ContextKind.SCHOOL, self.school_id),
            (ContextKind.NEIGHBORHOOD, self.neighborhood_id),
            (ContextKind.COMMUNITY, self.community_id),
        ):
            valid = ids >= 0
            for cid in np.unique(ids[valid]):
                members = tuple(int(a) for a in np.flatnonzero(ids == cid))
                out.append(MixingContext(id=int(cid), kind=kind, members=members))
        return out


def generate_population(cfg: PopulationConfig) -> tuple[list[Agent], list[MixingContext]]:
    """Generate the synthetic population as (agents, contexts).

    Deterministic for a fixed `cfg.rng_seed`. See `build_population` for the
    array view the engine consumes.
    """
    pop = build_population(cfg)
    return pop.agents(), pop.contexts()


def build_population(cfg: PopulationConfig) -> Population:
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    n = cfg.n_agents

    age_weights = cfg.resolved_age_distribution()
    ages = rng.choice(len(age_weights), size=n, p=age_weights).astype(np.int64)

    # Households: draw sizes until the town is covered; the last household is
    # truncated so the population size is exact.
    sizes_avail, size_probs = cfg.resolved_household_sizes()
    drawn: list[int] = []
    total = 0
    while total < n:
        s = int(rng.choice(sizes_avail, p=size_probs))
        drawn.append(s)
        total += s
    drawn[-1] -= total - n
    if drawn[-1] == 0:
        drawn.pop()
    hh_sizes = np.asarray(drawn, dtype=np.int64)
    n_hh = len(hh_sizes)
    household_id = np.repeat(np.arange(n_hh), hh_sizes)

    # Assign ages to household slots: each household receives one adult first
    # (so a school-closure parent can always be designated), then the rest of
    # the sampled ages are shuffled into the remaining slots. This permutes
    # the sampled multiset of ages, so the age histogram is untouched.
    adults = np.flatnonzero(ages >= 19)
    others = np.flatnonzero(ages < 19)
    if len(adults) < n_hh:
        # degenerate config (child-heavy town): fall back to a plain shuffle
        order = rng.permutation(n)
    else:
        adults = rng.permutation(adults)
        rest = rng.permutation(np.concatenate([adults[n_hh:], others]))
        order = np.empty(n, dtype=np.int64)
        first_slot = np.concatenate([[0], np.cumsum(hh_sizes)[:-1]])
        order[first_slot] = adults[:n_hh]
        remaining_slots = np.setdiff1d(np.arange(n), first_slot, assume_unique=True)
        order[remaining_slots] = rest
    ages = ages[order]

    life_expectancy = cfg.life_expectancy_at(ages)

    cluster_id = household_id // cfg.cluster_size
    neighborhood_id = np.arange(n) // cfg.neighborhood_size
    if cfg.community_size > 0:
        community_id = np.arange(n) // cfg.community_size
    else:
        community_id = np.zeros(n, dtype=np.int64)

    # Day contexts. Adults 19-64 are employed, children 5-18 enrolled, each
    # subject to the configured participation rates.
    workgroup_id = np.full(n, -1, dtype=np.int64)
    eligible_workers = np.flatnonzero((ages >= 19) & (ages <= 64))
    if cfg.employment_rate < 1.0:
        keep = rng.random(len(eligible_workers)) < cfg.employment_rate
        eligible_workers = eligible_workers[keep]
    eligible_workers = rng.permutation(eligible_workers)
    workgroup_id[eligible_workers] = np.arange(len(eligible_workers)) // cfg.workgroup_size

    class_id = np.full(n, -1, dtype=np.int64)
    students = np.flatnonzero((ages >= 5) & (ages <= 18))
    if cfg.school_enrollment_rate < 1.0:
        keep = rng.random(len(students)) < cfg.school_enrollment_rate
        students = students[keep]
    students = rng.permutation(students)
    class_id[students] = np.arange(len(students)) // cfg.class_size
    grade_id = np.where(class_id >= 0, class_id // cfg.classes_per_grade, -1)
    school_id = np.where(grade_id >= 0, grade_id // cfg.grades_per_school, -1)

    # One designated stay-home parent per household containing a student:
    # the first adult slot of the household (always an adult by construction).
    sc_parent = np.zeros(n, dtype=bool)
    has_student = np.zeros(n_hh, dtype=bool)
    np.logical_or.at(has_student, household_id[class_id >= 0], True)
    adult_mask = ages >= 19
    for hh in np.flatnonzero(has_student):
        members = np.flatnonzero(household_id == hh)
        hh_adults = members[adult_mask[members]]
        if len(hh_adults):
            sc_parent[hh_adults[0]] = True

    household_size = hh_sizes[household_id]
    return Population(
        config=cfg,
        ages=ages,
        life_expectancy=life_expectancy,
        household_id=household_id,
        household_size=household_size,
        cluster_id=cluster_id,
        neighborhood_id=neighborhood_id,
        community_id=community_id,
        workgroup_id=workgroup_id,
        class_id=class_id,
        grade_id=grade_id,
        school_id=school_id,
        sc_parent=sc_parent,
    )


def attack_rate_weighted_index_case(
    pop: Population, attack_rates: Sequence[float], rng: np.random.Generator
) -> int:
    """Sample an index case with bias matching the observed attack-rate pattern.

    Each agent's sampling weight is its age group's attack-rate weight divided
    by the group's population share, so age group g is selected with overall
    probability attack_rates[g].
    """
    w = np.asarray(attack_rates, dtype=float)
    if w.shape != (5,):
        raise ValueError("attack_rates must have 5 age-group entries")
    if (w < 0).any():
        raise ValueError("attack_rates must be non-negative")
    # published attack-rate patterns are rounded (the reference set sums to
    # 0.999); accept near-unit sums and renormalize
    if abs(w.sum() - 1.0) > 2e-3:
        raise ValueError(f"attack_rates must sum to 1 (got {w.sum():.6f})")
    w = w / w.sum()
    group = pop.age_group()
    share = np.bincount(group, minlength=5) / pop.n_agents
    empty = (share == 0) & (w > 0)
    if empty.any():
        raise ValueError(f"age group(s) {np.flatnonzero(empty).tolist()} empty but weighted")
    agent_w = np.zeros(pop.n_agents)
    nonzero = share[group] > 0
    agent_w[nonzero] = w[group[nonzero]] / share[group[nonzero]]
    return int(rng.choice(pop.n_agents, p=agent_w / agent_w.sum()))


# --- serialization -----------------------------------------------------------

def save_population(pop: Population, path: str | Path) -> None:
    cfg = pop.config
    doc = {
        "version": POPULATION_SCHEMA_VERSION,
        "config": {
            "n_agents": cfg.n_agents,
            "cluster_size": cfg.cluster_size,
            "workgroup_size": cfg.workgroup_size,
            "class_size": cfg.class_size,
            "classes_per_grade": cfg.classes_per_grade,
            "grades_per_school": cfg.grades_per_school,
            "neighborhood_size": cfg.neighborhood_size,
            "community_size": cfg.community_size,
            "employment_rate": cfg.employment_rate,
            "school_enrollment_rate": cfg.school_enrollment_rate,
            "rng_seed": cfg.rng_seed,
        },
        "agents": [
            {
                "id": i,
                "age": int(pop.ages[i]),
                "life_expectancy": float(pop.life_expectancy[i]),
                "household": int(pop.household_id[i]),
                "household_cluster": int(pop.cluster_id[i]),
                "neighborhood": int(pop.neighborhood_id[i]),
                "community": int(pop.community_id[i]),
                "work_group": int(pop.workgroup_id[i]),
                "school_class": int(pop.class_id[i]),
                "grade": int(pop.grade_id[i]),
                "school": int(pop.school_id[i]),
                "sc_parent": bool(pop.sc_parent[i]),
            }
            for i in range(pop.n_agents)
        ],
        "contexts": [
            {"kind": c.kind.value, "id": c.id, "active_cycle": c.active_cycle,
             "members": list(c.members)}
            for c in pop.contexts()
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_population(path: str | Path) -> Population:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != POPULATION_SCHEMA_VERSION:
        raise ValueError(f"unsupported population schema version {doc.get('version')!r}")
    agents = doc["agents"]
    n = len(agents)
    cfg = PopulationConfig(n_agents=n, **{
        k: v for k, v in doc["config"].items() if k != "n_agents"
    })

    def col(name, dtype=np.int64):
        return np.array([a[name] for a in agents], dtype=dtype)

    hh = col("household")
    hh_sizes = np.bincount(hh)
    pop = Population(
        config=cfg,
        ages=col("age"),
        life_expectancy=col("life_expectancy", float),
        household_id=hh,
        household_size=hh_sizes[hh],
        cluster_id=col("household_cluster"),
        neighborhood_id=col("neighborhood"),
        community_id=col("community"),
        workgroup_id=col("work_group"),
        class_id=col("school_class"),
        grade_id=col("grade"),
        school_id=col("school"),
        sc_parent=col("sc_parent", bool),
    )
    validate_population(pop)
    return pop


def validate_population(pop: Population) -> None:
    """Check the structural invariants every population must satisfy."""
    if (pop.ages < 0).any() or (pop.ages > 110).any():
        raise ValueError("ages must lie in [0, 110]")
    if (pop.life_expectancy <= pop.ages).any():
        raise ValueError("life expectancy must exceed age at generation time")
    for name, ids in (("household", pop.household_id), ("cluster", pop.cluster_id),
                      ("neighborhood", pop.neighborhood_id), ("community", pop.community_id)):
        if (ids < 0).any():
            raise ValueError(f"every agent must belong to exactly one {name}")
    sizes = np.bincount(pop.household_id)
    if sizes.min() < 1 or sizes.max() > 6:
        raise ValueError("household sizes must lie in [1, 6]")
    if (pop.household_size != sizes[pop.household_id]).any():
        raise ValueError("household_size column inconsistent with memberships")
    both = (pop.workgroup_id >= 0) & (pop.class_id >= 0)
    if both.any():
        raise ValueError("an agent cannot hold both a working group and a school class")
    students = pop.class_id >= 0
    if ((pop.grade_id[students] < 0) | (pop.school_id[students] < 0)).any():
        raise ValueError("students must carry class, grade and school ids")
