"""Cost, health-effect and net-health-benefit arithmetic.

Health losses are measured in DALY-years, costs in dollars. The net health
benefit of an intervention trajectory is the averted DALY loss relative to
the uncontrolled baseline minus the incurred cost converted to DALY units at
the willingness-to-pay rate lambda (dollars per DALY).

The weekly cost of full (100%) social distancing for the town is the national
weekly full-lockdown cost scaled by population share; a partial SD level
costs proportionally. Baseline CI/HQ costs cancel between the evaluated and
the null trajectory and are carried as zero.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


@dataclass(frozen=True)
class EconConfig:
    lam: float  # willingness to pay, dollars per DALY
    town_population: int
    national_weekly_full_sd_cost: float = 1.4e9
    reference_population: int = 24_190_907

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError("lambda (willingness to pay) must be positive")
        if self.town_population <= 0 or self.reference_population <= 0:
            raise ValueError("populations must be positive")

    @property
    def c1(self) -> float:
        """Weekly cost of full SD for the town, dollars."""
        return self.national_weekly_full_sd_cost * self.town_population / self.reference_population


def period_cost(sd_level: float, cfg: EconConfig) -> float:
    """Cost of one decision period at the given SD level (linear scaling)."""
    if not 0.0 <= sd_level <= 1.0:
        raise ValueError(f"sd_level must be in [0, 1], got {sd_level}")
    return sd_level * cfg.c1


def health_effect(losses_null: Sequence[float], losses_controlled: Sequence[float]) -> float:
    """Summed per-period averted DALY losses (null minus controlled)."""
    if len(losses_null) != len(losses_controlled):
        raise ValueError("loss series must have equal length")
    return float(sum(a - b for a, b in zip(losses_null, losses_controlled)))


def nhb(effect: float, cost: float, lam: float) -> float:
    """Net health benefit in DALY units: effect - cost / lambda."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return effect - cost / lam


@dataclass(frozen=True)
class PeriodAccount:
    """One decision period's ledger entry.

    The reward identity `reward == loss_null - loss_controlled - cost / lam`
    holds exactly by construction.
    """

    period: int
    sd_level: float
    loss_null: float
    loss_controlled: float
    cost: float
    reward: float

    def check_identity(self, lam: float, tol: float = 1e-9) -> bool:
        return abs(self.reward - (self.loss_null - self.loss_controlled - self.cost / lam)) <= tol


ACCOUNT_COLUMNS = ("period", "sd_level", "loss_null", "loss_controlled",
                   "cost", "reward", "cum_nhb")


def accounts_to_rows(accounts: Iterable[PeriodAccount]) -> list[dict]:
    rows = []
    cum = 0.0
    for a in accounts:
        cum += a.reward
        rows.append({"period": a.period, "sd_level": a.sd_level, "loss_null": a.loss_null,
                     "loss_controlled": a.loss_controlled, "cost": a.cost,
                     "reward": a.reward, "cum_nhb": cum})
    return rows


def write_account_csv(accounts: Sequence[PeriodAccount], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ACCOUNT_COLUMNS)
        w.writeheader()
        for row in accounts_to_rows(accounts):
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def episode_nhb(accounts: Sequence[PeriodAccount], lam: float) -> float:
    """Period-wise NHB recomputed from the account ledger (not from rewards)."""
    effect = health_effect([a.loss_null for a in accounts],
                           [a.loss_controlled for a in accounts])
    total_cost = sum(a.cost for a in accounts)
    return nhb(effect, total_cost, lam)
