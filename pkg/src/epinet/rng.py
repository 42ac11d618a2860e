"""Seed-stream helpers for reproducible parallel runs.

Every replicate/episode/task gets its own `numpy.random.Generator` derived
from a master seed through `SeedSequence.spawn`, so results are independent
of execution order and of how work is distributed across workers.
"""
from __future__ import annotations

import numpy as np


def master_sequence(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed)


def spawn_generators(seed: int, n: int) -> list[np.random.Generator]:
    """n independent generators derived from one master seed."""
    return [np.random.default_rng(s) for s in master_sequence(seed).spawn(n)]


def task_generator(seed: int, task_index: int) -> np.random.Generator:
    """Generator for task `task_index`, stable under any scheduling order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(task_index,)))


def torch_seed_from(seed: int, salt: int = 0) -> int:
    """Derive a 63-bit torch seed from the numpy master seed."""
    state = np.random.SeedSequence((seed, salt)).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1] >> 1)
