"""
Occupancy verdicts, win-rate regressions, stale windows and collision depth.

Occupancy is decided by ratio against a miss baseline, so the verdicts do
not depend on the unit of the timings:

    Occupied     avg >= occupied_ratio * baseline
    Uncertain    uncertain_ratio * baseline <= avg < occupied_ratio * baseline
    Unoccupied   otherwise
"""

from __future__ import annotations

import enum
import json
import random
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from statistics import fmean

import numpy as np

from .errors import (
    InsufficientData,
    InvalidConfig,
    NoBaseline,
    NoSamples,
    NotColliding,
    PreconditionViolated,
)
from .grace import (
    GraceClock,
    ReclaimQueue,
    ReclamationPolicy,
    reader_enter,
    reader_exit,
    reclaim_step,
)
from .probe import ProbeConfig, probe_range
from .registry import VfTable, delete_all_steps, lookup, put_ref
from .timing import TimingSample

STALE_READER_ID = 1_000_000


class Occupancy(enum.Enum):
    OCCUPIED = "occupied"
    UNCERTAIN = "uncertain"
    UNOCCUPIED = "unoccupied"


@dataclass(frozen=True)
class CalibrationIds:
    ids: tuple[int, ...]


@dataclass(frozen=True)
class GlobalMinimumQuantile:
    q: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise InvalidConfig("quantile must be in [0, 1]")


@dataclass(frozen=True)
class ClassifierConfig:
    baseline_mode: CalibrationIds | GlobalMinimumQuantile = field(
        default_factory=GlobalMinimumQuantile
    )
    occupied_ratio: float = 20.0
    uncertain_ratio: float = 1.5

    def __post_init__(self):
        if not self.occupied_ratio > self.uncertain_ratio >= 1.0:
            raise InvalidConfig("need occupied_ratio > uncertain_ratio >= 1.0")

    @classmethod
    def with_calibration(cls, ids: Iterable[int], **kw) -> "ClassifierConfig":
        return cls(CalibrationIds(tuple(ids)), **kw)

    def status(self, avg: float, baseline: float) -> Occupancy:
        if avg >= self.occupied_ratio * baseline:
            return Occupancy.OCCUPIED
        if avg >= self.uncertain_ratio * baseline:
            return Occupancy.UNCERTAIN
        return Occupancy.UNOCCUPIED


@dataclass(frozen=True)
class OccupancyRow:
    vf_id: int
    avg: float
    status: Occupancy


@dataclass
class OccupancyReport:
    rows: list[OccupancyRow]
    baseline: float

    def status_of(self, vf_id: int) -> Occupancy:
        for row in self.rows:
            if row.vf_id == vf_id:
                return row.status
        raise KeyError(vf_id)

    def statuses(self) -> dict[int, Occupancy]:
        return {row.vf_id: row.status for row in self.rows}

    def render_table(self) -> str:
        lines = ["VF ID   Avg Cycles   Occupancy Status", "-----"]
        for row in self.rows:
            lines.append(f"{row.vf_id:<8}{row.avg:<13.2f}{row.status.value}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["id,avg,status"]
        out += [f"{r.vf_id},{r.avg!r},{r.status.value}" for r in self.rows]
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "rows": [
                {"id": r.vf_id, "avg": r.avg, "status": r.status.value} for r in self.rows
            ],
        }


def per_id_average(samples: Iterable[TimingSample]) -> dict[int, float]:
    by_id: dict[int, list[int]] = defaultdict(list)
    for s in samples:
        by_id[s.id].append(s.duration)
    return {vf_id: fmean(d) for vf_id, d in sorted(by_id.items())}


def classify_averages(
    avgs: Mapping[int, float],
    cfg: ClassifierConfig,
    baseline: float | None = None,
) -> OccupancyReport:
    if not avgs:
        raise NoSamples("no per-id averages to classify")
    if baseline is None:
        mode = cfg.baseline_mode
        if isinstance(mode, CalibrationIds):
            calib = [avgs[i] for i in mode.ids if i in avgs]
            if not calib or len(calib) != len(mode.ids):
                raise NoBaseline(f"calibration ids {list(mode.ids)} missing from the data")
            baseline = fmean(calib)
        else:
            baseline = float(np.quantile(list(avgs.values()), mode.q))
    if not baseline > 0:
        raise NoBaseline(f"baseline must be positive, got {baseline}")
    rows = [
        OccupancyRow(vf_id, float(avg), cfg.status(avg, baseline))
        for vf_id, avg in sorted(avgs.items())
    ]
    return OccupancyReport(rows, float(baseline))


def classify(samples: Sequence[TimingSample], cfg: ClassifierConfig) -> OccupancyReport:
    if not samples:
        raise NoSamples("classify needs at least one timing sample")
    avgs = per_id_average(samples)
    baseline = None
    if isinstance(cfg.baseline_mode, GlobalMinimumQuantile):
        # quantile over every raw sample, not over the per-id means
        baseline = float(np.quantile([s.duration for s in samples], cfg.baseline_mode.q))
    return classify_averages(avgs, cfg, baseline)


@dataclass(frozen=True)
class RegressionReport:
    trials: int
    wins_a: int

    @property
    def win_rate(self) -> float:
        return self.wins_a / self.trials


def regress_compare(
    samples: Sequence[TimingSample],
    group_a: Sequence[int],
    candidate_pool: Sequence[int],
    group_size: int,
    trials: int,
    seed: int = 0,
) -> RegressionReport:
    """Count trials in which group A's mean lookup time beats a random group's.

    Every trial redraws one measurement per id from that id's samples, so a
    probe with several reps per id supplies fresh values each time.  Ties
    count against group A.
    """
    if trials < 1:
        raise InsufficientData("need at least one trial")
    by_id: dict[int, list[int]] = defaultdict(list)
    for s in samples:
        by_id[s.id].append(s.duration)
    pool = list(candidate_pool)
    if not group_a or group_size < 1 or len(pool) < group_size:
        raise InsufficientData("groups are empty or the pool is smaller than group_size")
    missing = [i for i in (*group_a, *pool) if not by_id.get(i)]
    if missing:
        raise InsufficientData(f"no samples for id(s) {sorted(set(missing))}")

    rng = random.Random(seed)
    wins = 0
    for _ in range(trials):
        mean_a = fmean(rng.choice(by_id[i]) for i in group_a)
        others = rng.sample(pool, group_size)
        mean_b = fmean(rng.choice(by_id[i]) for i in others)
        if mean_a > mean_b:
            wins += 1
    return RegressionReport(trials, wins)


@dataclass(frozen=True)
class StaleWindowReport:
    policy: ReclamationPolicy
    window_steps: int
    uaf_count: int
    steps_run: int
    deleted_ids: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "window_steps": self.window_steps,
            "uaf_count": self.uaf_count,
            "steps_run": self.steps_run,
            "deleted_ids": list(self.deleted_ids),
        }


def stale_window(
    table: VfTable,
    grace: GraceClock,
    queue: ReclaimQueue,
    alloc,
    policy: ReclamationPolicy,
    probe_cfg: ProbeConfig,
    classifier_cfg: ClassifierConfig,
    reclaim_cadence: int,
    clock,
    reader_dwell: int | None = -1,
    max_steps: int = 10_000,
) -> StaleWindowReport:
    """Delete every live VF and count steps in which a deleted id still looks occupied.

    A reader opens its session before the deletion and keeps probing through
    it (nested sessions reuse its entry epoch).  It leaves after
    ``reader_dwell`` steps; ``None`` pins it until a grace period is
    requested, and the default -1 means "leave at the first reclaim point".
    Steps spent inside the deletion itself (a synchronous policy waiting on
    the reader) are not part of the window.
    """
    if reclaim_cadence < 1:
        raise InvalidConfig("reclaim_cadence must be at least 1")
    dwell = reclaim_cadence if reader_dwell == -1 else reader_dwell
    deleted = tuple(table.live_ids())

    reader = reader_enter(grace, STALE_READER_ID)
    step = 0

    def tick():
        if reader.active and (
            (dwell is not None and step >= dwell) or (dwell is None and grace.gp_pending)
        ):
            reader_exit(grace, reader)
        if step % reclaim_cadence == 0:
            reclaim_step(queue, grace, alloc)
            table.prune(grace)

    deletion = delete_all_steps(table, grace, policy, queue, alloc)
    try:
        while True:
            next(deletion)
            step += 1
            grace.step = step
            tick()
    except StopIteration:
        pass

    window = 0
    uaf_at_start = len(grace.uaf_events)
    while step < max_steps:
        if not reader.active and not queue.pending:
            break
        step += 1
        grace.step = step
        reader_id = STALE_READER_ID if reader.active else STALE_READER_ID + 1
        samples = probe_range(table, probe_cfg, clock, grace, reader_id=reader_id)
        report = classify(samples, classifier_cfg)
        statuses = report.statuses()
        if any(statuses.get(i) is Occupancy.OCCUPIED for i in deleted):
            window += 1
        tick()

    if reader.active:
        reader_exit(grace, reader)
    return StaleWindowReport(
        policy=policy,
        window_steps=window,
        uaf_count=len(grace.uaf_events) - uaf_at_start,
        steps_run=step,
        deleted_ids=deleted,
    )


def collision_profile(
    table: VfTable,
    colliding_ids: Sequence[int],
    clock,
    grace: GraceClock,
    reps: int = 5,
    reader_id: int = 0,
) -> list[tuple[int, float]]:
    if not colliding_ids:
        return []
    buckets = {table.bucket_index(i) for i in colliding_ids}
    if len(buckets) != 1:
        raise NotColliding(f"ids {list(colliding_ids)} span buckets {sorted(buckets)}")
    for vf_id in colliding_ids:
        if table.get(vf_id) is None:
            raise PreconditionViolated(f"VF {vf_id} is not live")

    profile = []
    for vf_id in colliding_ids:
        durations = []
        depth = 0
        for _ in range(reps):
            handle = reader_enter(grace, reader_id)
            try:
                outcome, sample = lookup(table, vf_id, handle, clock)
            finally:
                reader_exit(grace, handle)
            if outcome.hit:
                put_ref(outcome.entry)
            depth = outcome.nodes_traversed
            durations.append(sample.duration)
        profile.append((depth, fmean(durations)))
    return sorted(profile)


def report_json(payload: dict) -> str:
    return json.dumps({"schema_version": 1, **payload}, indent=2, sort_keys=True) + "\n"
