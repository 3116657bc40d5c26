"""Clock sources for lookup timing and the sample record they produce."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass


@dataclass(frozen=True)
class CostModel:
    """Synthetic lookup cost, in abstract cycles.

    duration = c_enter + nodes * c_node + (c_kref if a refcount get was
    attempted) + c_exit, plus optional Gaussian jitter clamped at zero.
    The defaults give a depth-1 hit of 90 and an empty-bucket miss of 2.
    """

    c_enter: int = 1
    c_node: int = 30
    c_kref: int = 58
    c_exit: int = 1
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.c_enter, self.c_node, self.c_kref, self.c_exit) < 0:
            raise ValueError("cost constants must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def base_cost(self, nodes: int, kref: bool) -> int:
        return self.c_enter + nodes * self.c_node + (self.c_kref if kref else 0) + self.c_exit


class DeterministicClock:
    def __init__(self, costs: CostModel | None = None):
        self.costs = costs or CostModel()
        self._rng = random.Random(self.costs.seed)

    def begin(self):
        return None

    def end(self, token, nodes: int, kref: bool) -> int:
        duration = self.costs.base_cost(nodes, kref)
        if self.costs.noise_sigma > 0:
            duration = max(0, round(duration + self._rng.gauss(0.0, self.costs.noise_sigma)))
        return duration


class WallClock:
    """Nanosecond wall-clock timing of the real traversal."""

    def begin(self):
        return time.perf_counter_ns()

    def end(self, token, nodes: int, kref: bool) -> int:
        return max(0, time.perf_counter_ns() - token)


ClockSource = DeterministicClock | WallClock


@dataclass(frozen=True)
class TimingSample:
    id: int
    hit: bool
    duration: int
    cycle_index: int = 0
    rep_index: int = 0

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be non-negative")
