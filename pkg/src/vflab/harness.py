"""
Stress experiments: parallel create/delete flood and VF creation spam.

Deterministic mode runs every actor as a generator on one thread.  Each
scheduler step advances exactly one actor by one yield; the actor is chosen
by a seeded RNG, so a config plus seed replays bit for bit.  Actors:

* mutator   -- per iteration runs "create up to N" and "delete all", in a
               seeded order when ``interleave_create_delete`` is set;
* readers   -- enter a session, look up random ids node by node, leave after
               ``reader_dwell`` of their own steps (``None`` pins the reader
               until a synchronous grace period is requested);
* reclaimer -- runs ``reclaim_step`` every ``reclaim_cadence`` steps.

Realtime mode runs the same actors on real threads.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import random
import threading
from collections.abc import Generator
from dataclasses import dataclass, field

from .allocmodel import (
    DEFAULT_MAX_ORDER,
    DEFAULT_PAGE_SIZE,
    DEFAULT_TOTAL_PAGES,
    AllocProfile,
    BuddyAllocator,
    OomReport,
)
from .errors import AllocationFailure, CapacityExceeded, InvalidConfig
from .grace import (
    GraceClock,
    ReclaimQueue,
    ReclamationPolicy,
    UafEvent,
    reader_enter,
    reader_exit,
    reclaim_step,
)
from .registry import (
    DEFAULT_BUCKET_ORDER,
    DEFAULT_CAPACITY,
    VF_ID_MAX,
    VfTable,
    delete_all,
    delete_all_steps,
    insert,
    lookup,
    lookup_steps,
    put_ref,
)
from .timing import DeterministicClock

SCHEMA_VERSION = 1

TIMELINE_FIELDS = (
    "step",
    "live_count",
    "pending_reclaim_bytes",
    "free_bytes",
    "allocated_bytes",
    "largest_free_order",
    "fragmentation_index",
)


class Mode(enum.Enum):
    DETERMINISTIC = "deterministic"
    REALTIME = "realtime"


@dataclass(frozen=True)
class ChurnConfig:
    num_vfs: int = 64
    iterations: int = 16
    policy: ReclamationPolicy = ReclamationPolicy.DEFERRED_CALLBACK
    reader_count: int = 1
    reader_dwell: int | None = 4
    reclaim_cadence: int = 8
    bucket_order: int = DEFAULT_BUCKET_ORDER
    capacity: int = DEFAULT_CAPACITY
    total_pages: int = DEFAULT_TOTAL_PAGES
    page_size: int = DEFAULT_PAGE_SIZE
    max_order: int = DEFAULT_MAX_ORDER
    profile: AllocProfile = AllocProfile()
    mode: Mode = Mode.DETERMINISTIC
    seed: int = 0
    interleave_create_delete: bool = True
    max_steps: int | None = None
    stride: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.num_vfs < 0 or self.reader_count < 0:
            raise InvalidConfig("iterations, num_vfs and reader_count must be non-negative")
        if self.reader_dwell is not None and self.reader_dwell < 1:
            raise InvalidConfig("reader_dwell must be at least 1 (or None to pin)")
        if self.reclaim_cadence < 1 or self.stride < 1:
            raise InvalidConfig("reclaim_cadence and stride must be at least 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise InvalidConfig("max_steps must be non-negative")
        if self.profile.big_order > self.max_order:
            raise InvalidConfig("profile big_order exceeds max_order")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["policy"] = self.policy.value
        out["mode"] = self.mode.value
        out["profile"] = dataclasses.asdict(self.profile)
        return out


@dataclass(frozen=True)
class TimelineRow:
    step: int
    live_count: int
    pending_reclaim_bytes: int
    free_bytes: int
    allocated_bytes: int
    largest_free_order: int
    fragmentation_index: float


@dataclass
class ChurnReport:
    config: ChurnConfig
    timeline: list[TimelineRow] = field(default_factory=list)
    uaf_events: list[UafEvent] = field(default_factory=list)
    oom: OomReport | None = None
    completed_iterations: int = 0
    capacity_errors: int = 0
    steps: int = 0

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TIMELINE_FIELDS)
        for row in self.timeline:
            writer.writerow(
                [getattr(row, name) if name != "fragmentation_index" else repr(row.fragmentation_index)
                 for name in TIMELINE_FIELDS]
            )
        return buf.getvalue()

    def summary(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "completed_iterations": self.completed_iterations,
            "capacity_errors": self.capacity_errors,
            "steps": self.steps,
            "uaf_count": len(self.uaf_events),
            "uaf_events": [dataclasses.asdict(e) for e in self.uaf_events],
            "timeline_rows": len(self.timeline),
            "final": dataclasses.asdict(self.timeline[-1]) if self.timeline else None,
        }
        # the key is only present for runs that ended in a simulated OOM
        if self.oom is not None:
            out["oom"] = dataclasses.asdict(self.oom)
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


class DeterministicScheduler:
    """Advance one seeded-random runnable task per step."""

    def __init__(self, seed: int):
        self.rng = random.Random(seed)
        self._names: list[str] = []
        self._tasks: dict[str, Generator] = {}
        self.finished: dict[str, object] = {}

    def spawn(self, name: str, task: Generator) -> None:
        self._names.append(name)
        self._tasks[name] = task

    def __bool__(self) -> bool:
        return bool(self._names)

    def step(self) -> str:
        name = self._names[self.rng.randrange(len(self._names))]
        try:
            next(self._tasks[name])
        except StopIteration as stop:
            self._names.remove(name)
            del self._tasks[name]
            self.finished[name] = stop.value
        return name


class _Lab:
    def __init__(self, cfg: ChurnConfig):
        self.cfg = cfg
        self.table = VfTable(cfg.bucket_order, cfg.capacity)
        self.alloc = BuddyAllocator(cfg.total_pages, cfg.page_size, cfg.max_order)
        self.grace = GraceClock()
        self.queue = ReclaimQueue()
        self.clock = DeterministicClock()

    def row(self, step: int) -> TimelineRow:
        stats = self.alloc.snapshot_stats()
        return TimelineRow(
            step=step,
            live_count=self.table.live_count,
            pending_reclaim_bytes=self.queue.pending_bytes,
            free_bytes=stats.free_bytes,
            allocated_bytes=stats.allocated_bytes,
            largest_free_order=stats.largest_free_order,
            fragmentation_index=stats.fragmentation_index,
        )

    def reclaim(self) -> int:
        freed = reclaim_step(self.queue, self.grace, self.alloc)
        self.table.prune(self.grace)
        return freed


def _create_phase(lab: _Lab, report: ChurnReport):
    lab.table.prune(lab.grace)
    for vf_id in range(lab.cfg.num_vfs):
        if lab.table.get(vf_id) is not None:
            continue
        try:
            insert(lab.table, vf_id, lab.alloc, lab.cfg.profile)
        except CapacityExceeded:
            report.capacity_errors += 1
        yield


def _delete_phase(lab: _Lab):
    yield from delete_all_steps(lab.table, lab.grace, lab.cfg.policy, lab.queue, lab.alloc)
    yield


def _mutator(lab: _Lab, report: ChurnReport, rng: random.Random):
    for _ in range(lab.cfg.iterations):
        create_first = not (lab.cfg.interleave_create_delete and rng.random() < 0.5)
        if create_first:
            yield from _create_phase(lab, report)
            yield from _delete_phase(lab)
        else:
            yield from _delete_phase(lab)
            yield from _create_phase(lab, report)
        report.completed_iterations += 1


def _session_over(grace: GraceClock, dwell: int | None, spent: int) -> bool:
    if dwell is None:
        return grace.gp_pending
    return spent >= dwell


def _reader(lab: _Lab, reader_id: int, rng: random.Random):
    id_space = max(1, lab.cfg.num_vfs)
    while True:
        handle = reader_enter(lab.grace, reader_id)
        spent = 0
        while True:
            target = rng.randrange(id_space)
            outcome, _ = yield from lookup_steps(lab.table, target, handle, lab.clock)
            if outcome.hit:
                put_ref(outcome.entry)
            yield
            spent += outcome.nodes_traversed + 1
            if _session_over(lab.grace, lab.cfg.reader_dwell, spent):
                break
        reader_exit(lab.grace, handle)
        yield


def run_churn(cfg: ChurnConfig) -> ChurnReport:
    if cfg.num_vfs > cfg.capacity:
        raise InvalidConfig(f"num_vfs {cfg.num_vfs} exceeds table capacity {cfg.capacity}")
    if cfg.mode is Mode.REALTIME:
        return _run_churn_realtime(cfg)

    report = ChurnReport(cfg)
    if cfg.iterations == 0:
        return report

    lab = _Lab(cfg)
    sched = DeterministicScheduler(cfg.seed)
    sched.spawn("mutator", _mutator(lab, report, random.Random(f"{cfg.seed}:mutator")))
    for r in range(cfg.reader_count):
        sched.spawn(f"reader{r}", _reader(lab, r + 1, random.Random(f"{cfg.seed}:reader{r}")))

    step = 0
    while cfg.max_steps is None or step < cfg.max_steps:
        step += 1
        lab.grace.step = step
        try:
            sched.step()
        except AllocationFailure as exc:
            report.oom = dataclasses.replace(exc.report, step=step)
            report.timeline.append(lab.row(step))
            break
        if step % cfg.reclaim_cadence == 0:
            lab.reclaim()
        done = "mutator" in sched.finished
        if done or step % cfg.stride == 0:
            report.timeline.append(lab.row(step))
        if done:
            break

    report.steps = step
    report.uaf_events = list(lab.grace.uaf_events)
    return report


def run_creation_spam(cfg: ChurnConfig) -> ChurnReport:
    """Keep asking for ``num_vfs`` more VFs per iteration without deleting any."""
    report = ChurnReport(cfg)
    lab = _Lab(cfg)
    next_id = 0
    step = 0
    for _ in range(cfg.iterations):
        for _ in range(cfg.num_vfs):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                report.steps = step
                return report
            step += 1
            vf_id = next_id % (VF_ID_MAX + 1)
            next_id += 1
            try:
                insert(lab.table, vf_id, lab.alloc, cfg.profile)
            except CapacityExceeded:
                report.capacity_errors += 1
            except AllocationFailure as exc:
                report.oom = dataclasses.replace(exc.report, step=step)
                report.timeline.append(lab.row(step))
                report.steps = step
                return report
            if step % cfg.stride == 0:
                report.timeline.append(lab.row(step))
        report.completed_iterations += 1
    report.steps = step
    return report


def _run_churn_realtime(cfg: ChurnConfig) -> ChurnReport:
    report = ChurnReport(cfg)
    if cfg.iterations == 0:
        return report
    lab = _Lab(cfg)
    mutex = threading.Lock()
    stop = threading.Event()
    rows_lock = threading.Lock()
    ops = 0

    def record():
        if ops % cfg.stride == 0:
            with rows_lock:
                report.timeline.append(lab.row(ops))

    def reader_loop(reader_id: int, seed: str):
        rng = random.Random(seed)
        id_space = max(1, cfg.num_vfs)
        while not stop.is_set():
            handle = reader_enter(lab.grace, reader_id)
            spent = 0
            try:
                while not stop.is_set():
                    outcome, _ = lookup(lab.table, rng.randrange(id_space), handle, lab.clock)
                    if outcome.hit:
                        put_ref(outcome.entry)
                    spent += outcome.nodes_traversed + 1
                    if _session_over(lab.grace, cfg.reader_dwell, spent):
                        break
                    stop.wait(0)
            finally:
                reader_exit(lab.grace, handle)

    def reclaimer_loop():
        while not stop.wait(0.001):
            with mutex:
                lab.reclaim()

    threads = [
        threading.Thread(target=reader_loop, args=(r + 1, f"{cfg.seed}:reader{r}"), daemon=True)
        for r in range(cfg.reader_count)
    ]
    threads.append(threading.Thread(target=reclaimer_loop, daemon=True))
    for t in threads:
        t.start()

    rng = random.Random(f"{cfg.seed}:mutator")
    try:
        for _ in range(cfg.iterations):
            phases = ["create", "delete"]
            if cfg.interleave_create_delete and rng.random() < 0.5:
                phases.reverse()
            for phase in phases:
                if phase == "create":
                    for vf_id in range(cfg.num_vfs):
                        if cfg.max_steps is not None and ops >= cfg.max_steps:
                            raise _StepLimit
                        with mutex:
                            if lab.table.get(vf_id) is None:
                                try:
                                    insert(lab.table, vf_id, lab.alloc, cfg.profile)
                                except CapacityExceeded:
                                    report.capacity_errors += 1
                            ops += 1
                            lab.grace.step = ops
                            record()
                else:
                    with mutex:
                        delete_all(lab.table, lab.grace, cfg.policy, lab.queue, lab.alloc)
                        lab.table.prune(lab.grace)
                        ops += 1
                        lab.grace.step = ops
                        record()
            report.completed_iterations += 1
    except AllocationFailure as exc:
        report.oom = dataclasses.replace(exc.report, step=ops + 1)
        with mutex:
            report.timeline.append(lab.row(ops + 1))
        ops += 1
    except _StepLimit:
        pass
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=5)

    report.steps = ops
    report.uaf_events = list(lab.grace.uaf_events)
    return report


class _StepLimit(Exception):
    pass
