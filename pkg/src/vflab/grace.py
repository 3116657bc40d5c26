"""
Grace-period engine: read-side sessions, epochs and reclamation policies.

A removal stamped at epoch ``e`` becomes reclaimable once no active reader
has an entry epoch ``<= e``.  Waiting operations come in two flavours:

* ``*_steps`` generators yield once per step they spend blocked, which lets
  the deterministic scheduler interleave them with reader steps;
* the plain functions drive those generators to completion, sleeping on the
  clock's condition variable between attempts (realtime mode, or direct
  calls where nothing needs to wait).

Freed entries are poisoned rather than destroyed.  A reader that touches one
gets a :class:`UafEvent` recorded on the clock instead of a crash.
"""

from __future__ import annotations

import enum
import threading
import time
from collections.abc import Generator
from dataclasses import dataclass, field

from .errors import DeadlockDetected, GraceTimeout, NotActive, PreconditionViolated


class ReclamationPolicy(enum.Enum):
    UNSAFE_IMMEDIATE = "unsafe"
    DEFERRED_CALLBACK = "deferred"
    SYNCHRONOUS = "sync"

    @classmethod
    def parse(cls, value: "str | ReclamationPolicy") -> "ReclamationPolicy":
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.value, member.name, member.name.lower()):
                return member
        raise ValueError(f"unknown reclamation policy {value!r}")


@dataclass(eq=False)
class ReaderHandle:
    reader_id: int
    entry_epoch: int
    nesting: int = 0
    grace: "GraceClock | None" = field(default=None, repr=False)

    @property
    def active(self) -> bool:
        return self.nesting > 0


@dataclass(frozen=True)
class UafEvent:
    reader_id: int
    vf_id: int
    epoch_at_access: int
    step: int


class GraceClock:
    def __init__(self, start_epoch: int = 0):
        self._epoch = start_epoch
        self._readers: dict[int, ReaderHandle] = {}
        self._cond = threading.Condition()
        self._sync_waiters = 0
        # virtual time, advanced by whoever drives the simulation
        self.step = 0
        self.uaf_events: list[UafEvent] = []

    @property
    def current_epoch(self) -> int:
        return self._epoch

    @property
    def active_readers(self) -> dict[int, int]:
        with self._cond:
            return {rid: h.entry_epoch for rid, h in self._readers.items()}

    @property
    def gp_pending(self) -> bool:
        """True while some synchronize() call is waiting on readers."""
        return self._sync_waiters > 0

    def advance(self) -> int:
        with self._cond:
            self._epoch += 1
            return self._epoch

    def oldest_active_epoch(self) -> int | None:
        with self._cond:
            if not self._readers:
                return None
            return min(h.entry_epoch for h in self._readers.values())

    def grace_elapsed(self, removal_epoch: int) -> bool:
        oldest = self.oldest_active_epoch()
        return oldest is None or removal_epoch < oldest

    def is_active(self, reader_id: int) -> bool:
        with self._cond:
            return reader_id in self._readers

    def record_uaf(self, handle: ReaderHandle, vf_id: int) -> UafEvent:
        event = UafEvent(handle.reader_id, vf_id, self._epoch, self.step)
        with self._cond:
            self.uaf_events.append(event)
        return event

    def wait_change(self, timeout: float | None = None) -> None:
        with self._cond:
            if not self._cond.wait(timeout):
                raise GraceTimeout("no reader left its session within the timeout")


def reader_enter(clock: GraceClock, reader_id: int) -> ReaderHandle:
    with clock._cond:
        handle = clock._readers.get(reader_id)
        if handle is None:
            handle = ReaderHandle(reader_id, clock._epoch, 0, clock)
            clock._readers[reader_id] = handle
        handle.nesting += 1
        return handle


def reader_exit(clock: GraceClock, handle: ReaderHandle) -> None:
    with clock._cond:
        if handle.nesting <= 0 or clock._readers.get(handle.reader_id) is not handle:
            raise NotActive(f"reader {handle.reader_id} is not in a read-side session")
        handle.nesting -= 1
        if handle.nesting == 0:
            del clock._readers[handle.reader_id]
            clock._cond.notify_all()


def drive(steps: Generator, clock: GraceClock, timeout: float | None = None):
    """Run a ``*_steps`` generator to completion, blocking between yields."""
    deadline = None if timeout is None else time.monotonic() + timeout
    try:
        with clock._cond:
            # the generator checks its condition while we hold the lock, and
            # wait() releases it atomically, so no notify can slip past
            next(steps)
            while True:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    steps.close()
                    raise GraceTimeout("grace period did not complete within the timeout")
                clock._cond.wait(0.05 if remaining is None else min(0.05, remaining))
                next(steps)
    except StopIteration as stop:
        return stop.value


def synchronize_steps(
    clock: GraceClock, caller: int | None = None
) -> Generator[None, None, int]:
    """Advance the epoch and yield until every older reader has left.

    Returns the number of steps spent waiting.
    """
    if caller is not None and clock.is_active(caller):
        raise DeadlockDetected(f"reader {caller} called synchronize inside its own session")
    target = clock.advance()
    with clock._cond:
        clock._sync_waiters += 1
    waited = 0
    try:
        while True:
            oldest = clock.oldest_active_epoch()
            if oldest is None or oldest >= target:
                return waited
            yield
            waited += 1
    finally:
        with clock._cond:
            clock._sync_waiters -= 1


def synchronize(
    clock: GraceClock, caller: int | None = None, timeout: float | None = None
) -> float:
    """Blocking grace period.  Returns the seconds spent waiting."""
    started = time.monotonic()
    drive(synchronize_steps(clock, caller), clock, timeout)
    return time.monotonic() - started


@dataclass
class PendingFree:
    entry: object
    removal_epoch: int
    size_bytes: int


class ReclaimQueue:
    def __init__(self):
        self.pending: list[PendingFree] = []
        self.pending_bytes = 0
        self.freed_total = 0

    def __len__(self) -> int:
        return len(self.pending)

    def push(self, entry) -> None:
        item = PendingFree(entry, entry.removal_epoch, entry.size_bytes)
        self.pending.append(item)
        self.pending_bytes += item.size_bytes


def free_entry(entry, alloc) -> None:
    for block in entry.payload:
        alloc.free(block)
    entry.mark_freed()


def _check_releasable(entry) -> None:
    if entry.refcount != 0 or entry.is_live:
        raise PreconditionViolated(
            f"VF {entry.id} cannot be released (refcount={entry.refcount}, "
            f"state={entry.state.value})"
        )


def release_steps(entry, policy: ReclamationPolicy, clock: GraceClock, queue: ReclaimQueue, alloc):
    _check_releasable(entry)
    if policy is ReclamationPolicy.UNSAFE_IMMEDIATE:
        free_entry(entry, alloc)
    elif policy is ReclamationPolicy.DEFERRED_CALLBACK:
        queue.push(entry)
    else:
        yield from synchronize_steps(clock)
        free_entry(entry, alloc)


def release(
    entry,
    policy: ReclamationPolicy,
    clock: GraceClock,
    queue: ReclaimQueue,
    alloc,
    timeout: float | None = None,
) -> None:
    drive(release_steps(entry, policy, clock, queue, alloc), clock, timeout)


def reclaim_step(queue: ReclaimQueue, clock: GraceClock, alloc) -> int:
    oldest = clock.oldest_active_epoch()
    keep, freed = [], 0
    for item in queue.pending:
        if oldest is None or item.removal_epoch < oldest:
            free_entry(item.entry, alloc)
            queue.pending_bytes -= item.size_bytes
            freed += 1
        else:
            keep.append(item)
    queue.pending = keep
    queue.freed_total += freed
    return freed
